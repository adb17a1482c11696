//! Flat `dotted.key=value` experiment configuration.
//!
//! Resolution order: built-in defaults, then the config file, then `--set`
//! overrides. Unknown keys are rejected so typos fail loudly. The resolved
//! map is written back out verbatim by [`ExperimentConfig::to_text`].

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use fusionlab_core::fusion::{CombineOp, FusionVariant};
use fusionlab_core::model::{Head, ModelSpec};
use fusionlab_core::tasks::{TaskConfig, TaskKind, Vocab};

use crate::error::{HarnessError, Result};

/// Every accepted key with its default. `auto` and `none` mean "derive" and
/// "unset" respectively for the keys that allow them.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("task.kind", "spatial_relation"),
    ("task.grid", "3x3"),
    ("task.colors", "4"),
    ("task.shapes", "4"),
    ("task.noise_std", "0.05"),
    ("task.density", "0.3"),
    ("task.train_size", "2000"),
    ("task.eval_size", "200"),
    ("task.eval_split", "heldout"),
    ("model.dim", "64"),
    ("model.heads", "4"),
    ("model.blocks", "2"),
    ("model.encoder_blocks", "auto"),
    ("model.decoder_blocks", "2"),
    ("model.text_encoder_blocks", "0"),
    ("model.mlp_ratio", "4"),
    ("model.head", "decoder"),
    ("model.text_only", "false"),
    ("model.max_text_len", "32"),
    ("model.max_answer_len", "8"),
    ("model.fusion.variant", "compound_tokens"),
    ("model.fusion.combine_op", "channel_concat"),
    ("model.fusion.co_attention_blocks", "auto"),
    ("model.fusion.co_tok_rounds", "auto"),
    ("model.fusion.co_tok_learned_tokens", "auto"),
    ("model.fusion.co_tok_blocks_per_round", "auto"),
    ("optim.base_lr", "0.001"),
    ("optim.warmup_steps", "auto"),
    ("optim.cycle_steps", "auto"),
    ("optim.weight_decay", "0.01"),
    ("optim.dropout", "0.0"),
    ("optim.grad_clip_norm", "1.0"),
    ("optim.batch_size", "32"),
    ("optim.total_steps", "5000"),
    ("optim.beta1", "0.9"),
    ("optim.beta2", "0.999"),
    ("optim.eps", "1e-8"),
    ("train.eval_interval", "250"),
    ("train.checkpoint_interval", "0"),
    ("train.deterministic", "false"),
    ("train.threads", "auto"),
    ("train.stop_at_exact_match", "none"),
];

/// Warmup share of the run when `optim.warmup_steps=auto` (8k of 100k).
pub const AUTO_WARMUP_FRACTION: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    /// A fresh dataset drawn from a separate seed stream.
    Heldout,
    /// The training examples themselves (memorization runs).
    Train,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSettings {
    pub task: TaskConfig,
    pub train_size: usize,
    pub eval_size: usize,
    pub eval_split: EvalSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSettings {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub cycle_steps: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub deterministic: bool,
    pub threads: usize,
    pub stop_at_exact_match: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSettings,
    pub model: ModelSpec,
    pub optim: OptimSettings,
    pub train: TrainSettings,
    /// The resolved key/value map this config was built from.
    pub resolved: BTreeMap<String, String>,
}

fn err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_assignment(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Splits one `key=value` assignment.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| err(format!("expected key=value, got '{s}'")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(err(format!("empty key in '{s}'")));
    }
    Ok((k.to_string(), v.to_string()))
}

struct Lookup<'a>(&'a BTreeMap<String, String>);

impl Lookup<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).expect("every key has a default")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| err(format!("{key}={v}: {e}")))
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            "auto" | "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| err(format!("task.grid must look like 3x3, got '{s}'")))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| err(format!("task.grid={s}: {e}")));
    Ok((p(h)?, p(w)?))
}

impl ExperimentConfig {
    /// Defaults overlaid with `pairs` in order.
    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut map: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            let k = k.into();
            if !map.contains_key(&k) {
                return Err(err(format!("unknown key '{k}'")));
            }
            map.insert(k, v.into());
        }
        Self::from_map(map)
    }

    /// Loads a config file, then applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs)
    }

    /// A copy with extra overrides applied.
    pub fn with(&self, overrides: &[(&str, &str)]) -> Result<Self> {
        let mut map = self.resolved.clone();
        for (k, v) in overrides {
            if !map.contains_key(*k) {
                return Err(err(format!("unknown key '{k}'")));
            }
            map.insert(k.to_string(), v.to_string());
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let l = Lookup(&map);
        let kind: TaskKind = l.raw("task.kind").parse().map_err(|e: fusionlab_core::Error| err(e.to_string()))?;
        let grid = parse_grid(l.raw("task.grid"))?;
        let mut task = TaskConfig::new(kind, grid);
        task.colors = l.get("task.colors")?;
        task.shapes = l.get("task.shapes")?;
        task.noise_std = l.get("task.noise_std")?;
        task.density = l.get("task.density")?;
        task.validate().map_err(|e| err(e.to_string()))?;
        let eval_split = match l.raw("task.eval_split") {
            "heldout" => EvalSplit::Heldout,
            "train" => EvalSplit::Train,
            other => return Err(err(format!("task.eval_split must be heldout or train, got '{other}'"))),
        };
        let task = TaskSettings {
            task,
            train_size: l.get("task.train_size")?,
            eval_size: l.get("task.eval_size")?,
            eval_split,
        };
        if task.train_size == 0 || (task.eval_split == EvalSplit::Heldout && task.eval_size == 0) {
            return Err(err("dataset sizes must be positive"));
        }

        let variant: FusionVariant = l.get("model.fusion.variant")?;
        let combine: CombineOp = l.get("model.fusion.combine_op")?;
        let dim: usize = l.get("model.dim")?;
        let heads: usize = l.get("model.heads")?;
        let blocks: usize = l.get("model.blocks")?;
        let mut model = ModelSpec::with_depth(variant, dim, heads, Vocab::new().len(), grid, blocks);
        model.fusion = model.fusion.with_combine(combine);
        if let Some(b) = l.opt("model.encoder_blocks")? {
            model.num_encoder_blocks = b;
        }
        if let Some(b) = l.opt("model.fusion.co_attention_blocks")? {
            model.fusion.co_attention_blocks = b;
        }
        if let Some(r) = l.opt("model.fusion.co_tok_rounds")? {
            model.fusion.co_tok_rounds = r;
        }
        // Never learn more tokens than the image has at desk-scale grids.
        model.fusion.co_tok_learned_tokens = match l.opt("model.fusion.co_tok_learned_tokens")? {
            Some(t) => t,
            None => model.fusion.co_tok_learned_tokens.min(grid.0 * grid.1),
        };
        if let Some(b) = l.opt("model.fusion.co_tok_blocks_per_round")? {
            model.fusion.co_tok_blocks_per_round = b;
        }
        model.decoder_blocks = l.get("model.decoder_blocks")?;
        model.text_encoder_blocks = l.get("model.text_encoder_blocks")?;
        model.mlp_ratio = l.get("model.mlp_ratio")?;
        model.fusion.mlp_ratio = model.mlp_ratio;
        model.text_only = l.get("model.text_only")?;
        model.max_text_len = l.get("model.max_text_len")?;
        model.max_answer_len = l.get("model.max_answer_len")?;
        model.head = match l.raw("model.head") {
            "decoder" => Head::Decoder,
            "classifier" => Head::LinearClassifier {
                num_classes: task.task.answer_words().len(),
            },
            other => return Err(err(format!("model.head must be decoder or classifier, got '{other}'"))),
        };
        model.validate().map_err(|e| err(e.to_string()))?;

        let total_steps: usize = l.get("optim.total_steps")?;
        let warmup_steps = match l.opt("optim.warmup_steps")? {
            Some(w) => w,
            None => (total_steps as f64 * AUTO_WARMUP_FRACTION).round() as usize,
        };
        let cycle_steps = match l.opt("optim.cycle_steps")? {
            Some(c) => c,
            None => total_steps.saturating_sub(warmup_steps).max(1),
        };
        let optim = OptimSettings {
            base_lr: l.get("optim.base_lr")?,
            warmup_steps,
            cycle_steps,
            weight_decay: l.get("optim.weight_decay")?,
            dropout: l.get("optim.dropout")?,
            grad_clip_norm: l.get("optim.grad_clip_norm")?,
            batch_size: l.get("optim.batch_size")?,
            total_steps,
            beta1: l.get("optim.beta1")?,
            beta2: l.get("optim.beta2")?,
            eps: l.get("optim.eps")?,
        };
        if total_steps == 0 || optim.batch_size == 0 {
            return Err(err("optim.total_steps and optim.batch_size must be positive"));
        }
        if optim.warmup_steps >= total_steps {
            return Err(err(format!(
                "optim.warmup_steps ({}) must be below optim.total_steps ({total_steps})",
                optim.warmup_steps
            )));
        }
        if !(optim.grad_clip_norm > 0.0) {
            return Err(err("optim.grad_clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&optim.dropout) {
            return Err(err("optim.dropout must be in [0, 1)"));
        }
        if !(optim.base_lr >= 0.0) || !(0.0..1.0).contains(&optim.beta1) || !(0.0..1.0).contains(&optim.beta2) {
            return Err(err("optim.base_lr must be >= 0 and betas in [0, 1)"));
        }

        let threads = match l.opt::<usize>("train.threads")? {
            Some(0) => return Err(err("train.threads must be positive")),
            Some(t) => t,
            None => std::thread::available_parallelism().map_or(1, usize::from),
        };
        let train = TrainSettings {
            eval_interval: l.get("train.eval_interval")?,
            checkpoint_interval: l.get("train.checkpoint_interval")?,
            deterministic: l.get("train.deterministic")?,
            threads,
            stop_at_exact_match: l.opt("train.stop_at_exact_match")?,
        };

        Ok(Self {
            seed: l.get("seed")?,
            task,
            model,
            optim,
            train,
            resolved: map,
        })
    }

    /// The resolved configuration as sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.resolved.get(key).map(String::as_str)
    }
}
