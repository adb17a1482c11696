//! Seeded training loop: data, batching, clipping, AdamW, periodic eval,
//! checkpoints and metric logging.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fusionlab_core::checkpoint::Checkpoint;
use fusionlab_core::costmodel::count_model;
use fusionlab_core::model::Head;
use fusionlab_core::tasks::{evaluate, generate_dataset, Dataset, EvalResult};
use fusionlab_core::{Graph, Model, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalSplit, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::optim::{clip_global_norm, lr_schedule, AdamW};

pub const METRICS_HEADER: [&str; 6] = ["step", "loss", "lr", "exact_match", "vqa_soft", "grad_norm"];

const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_EVAL_DATA: u64 = 2;
const STREAM_MODEL: u64 = 3;
const STREAM_EPOCH: u64 = 4;
const STREAM_DROPOUT: u64 = 5;

/// Mixes a run seed with a stream tag and an index (splitmix64 finalizer), so
/// every random consumer gets an independent, reproducible seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One metrics row. Eval fields are only filled on eval steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub exact_match: Option<f64>,
    pub vqa_soft: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = METRICS_HEADER.join(",");
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.loss,
            r.lr,
            opt(r.exact_match),
            opt(r.vqa_soft),
            r.grad_norm
        ));
    }
    s
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| HarnessError::Config("empty metrics file".into()))?;
    if header.split(',').collect::<Vec<_>>() != METRICS_HEADER {
        return Err(HarnessError::Config(format!("unexpected metrics header '{header}'")));
    }
    let bad = |l: &str| HarnessError::Config(format!("malformed metrics row '{l}'"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(MetricRow {
                step: f[0].parse().map_err(|_| bad(l))?,
                loss: num(f[1])?,
                lr: num(f[2])?,
                exact_match: opt(f[3])?,
                vqa_soft: opt(f[4])?,
                grad_norm: num(f[5])?,
            })
        })
        .collect()
}

/// Training and evaluation sets for a config. Held-out data comes from its own
/// seed stream; `eval_split=train` evaluates on the training examples.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let t = &cfg.task;
    let train = generate_dataset(derive_seed(cfg.seed, STREAM_TRAIN_DATA, 0), t.train_size, &t.task)?;
    let eval = match t.eval_split {
        EvalSplit::Train => train.clone(),
        EvalSplit::Heldout => generate_dataset(derive_seed(cfg.seed, STREAM_EVAL_DATA, 0), t.eval_size, &t.task)?,
    };
    Ok((train, eval))
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<(Model, ParamStore)> {
    Ok(Model::new(cfg.model.clone(), derive_seed(cfg.seed, STREAM_MODEL, 0))?)
}

/// Rebuilds the model a checkpoint was saved from.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::new(ckpt.spec.clone(), 0)?;
    let copied = Model::copy_matching(&ckpt.params, &mut store, |_| true)?;
    if copied != store.len() || ckpt.params.len() != store.len() {
        return Err(HarnessError::Io("checkpoint parameters do not match its model spec".into()));
    }
    Ok((model, store))
}

/// Starting point for fine-tuning from a saved run. A decoder checkpoint
/// combined with a classifier-head config gets its head swapped; the new
/// classifier is seeded from the run seed.
pub fn init_from_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<(Model, ParamStore)> {
    let ckpt = Checkpoint::load(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let (model, params) = model_from_checkpoint(&ckpt)?;
    match (model.spec.head, cfg.model.head) {
        (Head::Decoder, Head::LinearClassifier { num_classes }) => {
            Ok(model.head_swap(&params, num_classes, derive_seed(cfg.seed, STREAM_MODEL, 1))?)
        }
        (a, b) if a == b => Ok((model, params)),
        (a, b) => Err(HarnessError::Config(format!("cannot fine-tune a {a:?} checkpoint into a {b:?} head"))),
    }
}

/// Evaluates with up to `threads` workers. Single-threaded evaluation is the
/// reference; chunked evaluation may differ only in float summation order.
pub fn evaluate_parallel(model: &Model, params: &ParamStore, ds: &Dataset, threads: usize) -> Result<EvalResult> {
    if threads <= 1 || ds.len() < 2 {
        return Ok(evaluate(model, params, ds)?);
    }
    let chunk = ds.len().div_ceil(threads);
    let parts: Vec<Result<(usize, EvalResult)>> = std::thread::scope(|s| {
        let handles: Vec<_> = ds
            .examples
            .chunks(chunk)
            .map(|c| {
                let part = Dataset {
                    seed: ds.seed,
                    config: ds.config.clone(),
                    examples: c.to_vec(),
                };
                s.spawn(move || Ok((part.len(), evaluate(model, params, &part)?)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut em = 0.0;
    let mut soft = 0.0;
    let mut per_task = std::collections::BTreeMap::new();
    for p in parts {
        let (n, r) = p?;
        em += r.exact_match_accuracy * n as f64;
        soft += r.vqa_soft_accuracy * n as f64;
        for (k, b) in r.per_task {
            let e: &mut fusionlab_core::tasks::TaskBreakdown = per_task.entry(k).or_default();
            let total = e.count + b.count;
            e.exact_match_accuracy = (e.exact_match_accuracy * e.count as f64 + b.exact_match_accuracy * b.count as f64) / total as f64;
            e.vqa_soft_accuracy = (e.vqa_soft_accuracy * e.count as f64 + b.vqa_soft_accuracy * b.count as f64) / total as f64;
            e.count = total;
        }
    }
    let n = ds.len() as f64;
    Ok(EvalResult {
        exact_match_accuracy: em / n,
        vqa_soft_accuracy: soft / n,
        per_task,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write metrics, checkpoints and the config echo.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by this trainer.
    pub resume: Option<PathBuf>,
    /// Suppress per-eval progress lines on stderr.
    pub quiet: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: String,
    pub text_only: bool,
    pub head: String,
    pub steps_completed: usize,
    pub final_loss: f64,
    pub exact_match: f64,
    pub vqa_soft: f64,
    pub params: usize,
    pub flops: u64,
    pub checksum: String,
    pub train_digest: String,
    pub elapsed_secs: f64,
    pub deterministic: bool,
}

pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub records: Vec<MetricRow>,
    pub final_eval: EvalResult,
    pub summary: RunSummary,
}

/// Per-epoch shuffled example order.
struct BatchSampler {
    seed: u64,
    n: usize,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl BatchSampler {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epoch: None,
            perm: Vec::new(),
        }
    }

    /// Example indices for 1-based `step`, independent of earlier calls.
    fn batch(&mut self, step: usize, size: usize) -> Vec<usize> {
        (0..size)
            .map(|i| {
                let pos = (step - 1) * size + i;
                let epoch = pos / self.n;
                if self.epoch != Some(epoch) {
                    self.perm = (0..self.n).collect();
                    self.perm
                        .shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_EPOCH, epoch as u64)));
                    self.epoch = Some(epoch);
                }
                self.perm[pos % self.n]
            })
            .collect()
    }
}

/// Mean loss and summed-then-averaged gradients over one batch.
fn batch_gradients(
    model: &Model,
    params: &ParamStore,
    ds: &Dataset,
    batch: &[usize],
    dropout: f64,
    dropout_seed: impl Fn(usize) -> u64 + Sync,
    threads: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let run_range = |range: std::ops::Range<usize>| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut loss_sum = 0.0;
        let mut acc: Option<Vec<Vec<f64>>> = None;
        for i in range {
            let mut g = Graph::new(params).with_dropout(dropout, dropout_seed(i));
            let loss = model.loss(&mut g, &ds.examples[batch[i]])?;
            loss_sum += g.tape.value(loss).values()[0];
            g.backward(loss)?;
            let grads = g.param_grads();
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().flatten().zip(grads.iter().flatten()).for_each(|(x, y)| *x += y),
            }
        }
        Ok((loss_sum, acc.unwrap_or_default()))
    };

    let b = batch.len();
    let (loss_sum, mut grads) = if threads <= 1 || b < 2 {
        run_range(0..b)?
    } else {
        let chunk = b.div_ceil(threads);
        let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..b)
                .step_by(chunk)
                .map(|start| {
                    let run = &run_range;
                    s.spawn(move || run(start..(start + chunk).min(b)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
        });
        let mut parts = parts.into_iter();
        let (mut loss, mut acc) = parts.next().expect("at least one chunk")?;
        for p in parts {
            let (l, g) = p?;
            loss += l;
            acc.iter_mut().flatten().zip(g.iter().flatten()).for_each(|(x, y)| *x += y);
        }
        (loss, acc)
    };
    let scale = 1.0 / b as f64;
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok((loss_sum * scale, grads))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn save_checkpoint(path: &Path, model: &Model, params: &ParamStore, opt: &AdamW, step: usize, seed: u64) -> Result<()> {
    let mut ckpt = Checkpoint::new(model.spec.clone(), params.clone());
    ckpt.aux.push(("adam_m".into(), opt.m.clone()));
    ckpt.aux.push(("adam_v".into(), opt.v.clone()));
    ckpt.meta = serde_json::json!({ "step": step, "adam_t": opt.t, "seed": seed });
    ckpt.save(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Trains a freshly initialized model for `cfg`.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let (model, params) = init_model(cfg)?;
    train_from(cfg, model, params, opts)
}

/// Trains `model` starting from `params` (e.g. a head-swapped checkpoint).
/// The model's own spec is used; `cfg.model` is ignored here.
pub fn train_from(cfg: &ExperimentConfig, model: Model, mut params: ParamStore, opts: &TrainOptions) -> Result<TrainOutcome> {
    let started = Instant::now();
    let o = &cfg.optim;
    let threads = if cfg.train.deterministic { 1 } else { cfg.train.threads };
    let (train_ds, eval_ds) = build_datasets(cfg)?;
    let digest_before = train_ds.digest();
    let eval_digest_before = eval_ds.digest();

    let mut opt = AdamW::new(&params, o);
    let mut start_step = 1;
    if let Some(path) = &opts.resume {
        let ckpt = Checkpoint::load(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        if ckpt.spec != model.spec {
            return Err(HarnessError::Config("resume checkpoint was saved from a different model spec".into()));
        }
        let (_, restored) = model_from_checkpoint(&ckpt)?;
        params = restored;
        let group = |name: &str| {
            ckpt.aux_group(name)
                .cloned()
                .ok_or_else(|| HarnessError::Io(format!("checkpoint lacks optimizer group {name}")))
        };
        opt.m = group("adam_m")?;
        opt.v = group("adam_v")?;
        opt.t = ckpt.meta["adam_t"].as_u64().unwrap_or(0);
        let step = ckpt.meta["step"]
            .as_u64()
            .ok_or_else(|| HarnessError::Io("checkpoint lacks a step".into()))?;
        start_step = step as usize + 1;
    }

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
        write_file(&dir.join("config.txt"), cfg.to_text())?;
        write_file(&dir.join("cost.csv"), count_model(&model.spec).to_csv())?;
    }

    let mut sampler = BatchSampler::new(cfg.seed, train_ds.len());
    let mut records = Vec::new();
    let mut final_eval = None;
    let mut last_step = start_step.saturating_sub(1);
    let mut final_loss = f64::NAN;
    for step in start_step..=o.total_steps {
        let lr = lr_schedule(step, o);
        let batch = sampler.batch(step, o.batch_size);
        let (loss, mut grads) = batch_gradients(
            &model,
            &params,
            &train_ds,
            &batch,
            o.dropout,
            |i| derive_seed(cfg.seed, STREAM_DROPOUT, (step * o.batch_size + i) as u64),
            threads,
        )?;
        if !loss.is_finite() {
            return Err(HarnessError::NonFinite { step, what: "loss".into() });
        }
        let grad_norm = clip_global_norm(&mut grads, o.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(HarnessError::NonFinite { step, what: "gradient".into() });
        }
        opt.step(&mut params, &grads, lr);
        last_step = step;
        final_loss = loss;

        let is_eval = cfg.train.eval_interval > 0 && step % cfg.train.eval_interval == 0 || step == o.total_steps;
        let mut row = MetricRow {
            step,
            loss,
            lr,
            exact_match: None,
            vqa_soft: None,
            grad_norm,
        };
        let mut stop = false;
        if is_eval {
            let r = evaluate_parallel(&model, &params, &eval_ds, threads)?;
            row.exact_match = Some(r.exact_match_accuracy);
            row.vqa_soft = Some(r.vqa_soft_accuracy);
            if !opts.quiet {
                eprintln!(
                    "step {step:>6}  loss {loss:.4}  lr {lr:.2e}  em {:.3}  soft {:.3}",
                    r.exact_match_accuracy, r.vqa_soft_accuracy
                );
            }
            stop = cfg.train.stop_at_exact_match.is_some_and(|t| r.exact_match_accuracy >= t);
            final_eval = Some(r);
        } else {
            final_eval = None;
        }
        records.push(row);

        if let Some(dir) = &opts.out_dir {
            if cfg.train.checkpoint_interval > 0 && step % cfg.train.checkpoint_interval == 0 {
                save_checkpoint(&dir.join(format!("step{step}.ckpt")), &model, &params, &opt, step, cfg.seed)?;
            }
        }
        if stop {
            break;
        }
    }
    let final_eval = match final_eval {
        Some(r) => r,
        None => evaluate_parallel(&model, &params, &eval_ds, threads)?,
    };

    if train_ds.digest() != digest_before || eval_ds.digest() != eval_digest_before {
        return Err(HarnessError::Config("dataset changed during training".into()));
    }

    let cost = count_model(&model.spec);
    let summary = RunSummary {
        seed: cfg.seed,
        variant: model.spec.fusion.variant.to_string(),
        text_only: model.spec.text_only,
        head: match model.spec.head {
            Head::Decoder => "decoder".into(),
            Head::LinearClassifier { num_classes } => format!("classifier{num_classes}"),
        },
        steps_completed: last_step,
        final_loss,
        exact_match: final_eval.exact_match_accuracy,
        vqa_soft: final_eval.vqa_soft_accuracy,
        params: params.numel(),
        flops: cost.total_flops,
        checksum: params.checksum(),
        train_digest: digest_before,
        elapsed_secs: started.elapsed().as_secs_f64(),
        deterministic: cfg.train.deterministic,
    };

    if let Some(dir) = &opts.out_dir {
        write_file(&dir.join("metrics.csv"), metrics_to_csv(&records))?;
        save_checkpoint(&dir.join("final.ckpt"), &model, &params, &opt, last_step, cfg.seed)?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write_file(&dir.join("run.json"), json + "\n")?;
    }

    Ok(TrainOutcome {
        model,
        params,
        optimizer: opt,
        records,
        final_eval,
        summary,
    })
}
