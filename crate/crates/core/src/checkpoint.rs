//! Binary checkpoints: magic, manifest length, JSON manifest, raw tensor data.
//!
//! Layout:
//! ```text
//! b"FLCKPT01" | u64 LE manifest length | manifest JSON | tensor bytes
//! ```
//! The manifest carries the [`ModelSpec`], free-form metadata, and one entry
//! per tensor (group, path, shape, byte offset). Tensor bytes are
//! little-endian `f64`, so a save/load cycle is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FLCKPT01";
pub const CHECKPOINT_FORMAT: &str = "fusionlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    model_spec: ModelSpec,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

/// Model parameters plus named auxiliary tensor groups (e.g. optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub aux: Vec<(String, ParamStore)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParamStore) -> Self {
        Self {
            spec,
            params,
            aux: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn aux_group(&self, name: &str) -> Option<&ParamStore> {
        self.aux.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let groups = std::iter::once(("params", &self.params)).chain(self.aux.iter().map(|(n, s)| (n.as_str(), s)));
        for (group, store) in groups.clone() {
            for (_, name, t) in store.iter() {
                entries.push(Entry {
                    group: group.to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel() * 8;
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: "f64".into(),
            model_spec: self.spec.clone(),
            meta: self.meta.clone(),
            entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(offset);
        for (_, store) in groups {
            for (_, _, t) in store.iter() {
                for v in t.values() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        if manifest.dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut params = ParamStore::new();
        let mut aux: Vec<(String, ParamStore)> = Vec::new();
        for e in manifest.entries {
            let numel: usize = e.shape.iter().product();
            let end = e.offset + numel * 8;
            let bytes = data
                .get(e.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("{}: data truncated", e.name)))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, values)?;
            let store = if e.group == "params" {
                &mut params
            } else {
                match aux.iter().position(|(n, _)| *n == e.group) {
                    Some(i) => &mut aux[i].1,
                    None => {
                        aux.push((e.group.clone(), ParamStore::new()));
                        &mut aux.last_mut().unwrap().1
                    }
                }
            };
            store.insert(e.name, t)?;
        }
        Ok(Self {
            spec: manifest.model_spec,
            params,
            aux,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}
