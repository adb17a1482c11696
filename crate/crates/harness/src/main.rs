use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fusionlab::compare::{compare_fusions, CompareOptions, VariantChoice};
use fusionlab::config::{parse_assignment, ExperimentConfig};
use fusionlab::error::{HarnessError, Result};
use fusionlab::plot::plot_directory;
use fusionlab::train::{build_datasets, evaluate_parallel, init_from_checkpoint, model_from_checkpoint, train, train_from, TrainOptions};
use fusionlab_core::checkpoint::Checkpoint;
use fusionlab_core::costmodel::count_model;

#[derive(Parser)]
#[command(name = "fusionlab", version, about = "Train, evaluate and compare vision-language fusion variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue an interrupted run from one of its checkpoints.
        #[arg(long, conflicts_with = "init_from")]
        resume: Option<PathBuf>,
        /// Start from a saved run; a decoder checkpoint with a classifier config is head-swapped.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured evaluation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train several fusion variants across seeds and tabulate them.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names; `text_only` adds the blind baseline.
        #[arg(long, value_delimiter = ',', default_value = "merged_attention,compound_tokens,text_only")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Concurrent runs (defaults to 1, or train.threads when not deterministic).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the analytic flop and parameter table for the configured model.
    Cost {
        #[command(flatten)]
        common: Common,
    },
    /// Write the training and evaluation datasets as JSONL.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Render loss curves and the accuracy-vs-flops scatter from a run directory.
    Plot {
        /// Directory containing metrics.csv files and optionally comparison.csv.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let mut overrides = c.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = c.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if c.deterministic {
        overrides.push(("train.deterministic".into(), "true".into()));
    }
    ExperimentConfig::load(c.config.as_deref(), &overrides)
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn io_err(p: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", p.display()))
}

fn write(p: &Path, text: &str) -> Result<()> {
    if let Some(parent) = p.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(p, text).map_err(|e| io_err(p, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            resume,
            init_from,
        } => {
            let cfg = resolve(&common)?;
            let opts = TrainOptions {
                out_dir: Some(out_dir(&common, "runs/train")),
                resume,
                quiet: false,
            };
            let outcome = match init_from {
                Some(path) => {
                    let (model, params) = init_from_checkpoint(&cfg, &path)?;
                    train_from(&cfg, model, params, &opts)?
                }
                None => train(&cfg, &opts)?,
            };
            let s = &outcome.summary;
            println!(
                "steps {}  loss {:.4}  exact_match {:.4}  vqa_soft {:.4}  checksum {}",
                s.steps_completed, s.final_loss, s.exact_match, s.vqa_soft, s.checksum
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let ckpt = Checkpoint::load(&checkpoint).map_err(|e| io_err(&checkpoint, e))?;
            let (model, params) = model_from_checkpoint(&ckpt)?;
            if model.spec.image_grid != cfg.task.task.grid {
                return Err(HarnessError::Config(format!(
                    "checkpoint expects grid {:?} but task.grid is {:?}",
                    model.spec.image_grid, cfg.task.task.grid
                )));
            }
            let (_, eval_ds) = build_datasets(&cfg)?;
            let threads = if cfg.train.deterministic { 1 } else { cfg.train.threads };
            let r = evaluate_parallel(&model, &params, &eval_ds, threads)?;
            println!("exact_match {:.4}  vqa_soft {:.4}  n {}", r.exact_match_accuracy, r.vqa_soft_accuracy, eval_ds.len());
            if let Some(out) = &common.out {
                let json = serde_json::to_string_pretty(&r).expect("eval result serializes");
                write(&out.join("eval.json"), &(json + "\n"))?;
                write(&out.join("config.txt"), &cfg.to_text())?;
            }
        }
        Command::Compare {
            common,
            variants,
            seeds,
            workers,
        } => {
            let cfg = resolve(&common)?;
            let variants = variants.iter().map(|v| VariantChoice::parse(v.trim())).collect::<Result<Vec<_>>>()?;
            let workers = workers.unwrap_or(if cfg.train.deterministic { 1 } else { cfg.train.threads });
            let cmp = compare_fusions(
                &cfg,
                &variants,
                &seeds,
                &CompareOptions {
                    out_dir: Some(out_dir(&common, "runs/compare")),
                    workers,
                    quiet: false,
                },
            )?;
            print!("{}", cmp.to_text());
        }
        Command::Cost { common } => {
            let cfg = resolve(&common)?;
            let report = count_model(&cfg.model);
            print!("{}", report.to_table());
            if let Some(out) = &common.out {
                write(&out.join("cost.csv"), &report.to_csv())?;
                write(&out.join("config.txt"), &cfg.to_text())?;
            }
        }
        Command::GenData { common } => {
            let cfg = resolve(&common)?;
            let out = out_dir(&common, "data");
            let (train_ds, eval_ds) = build_datasets(&cfg)?;
            for (name, ds) in [("train.jsonl", &train_ds), ("eval.jsonl", &eval_ds)] {
                write(&out.join(name), &String::from_utf8(ds.to_jsonl_bytes()).expect("jsonl is utf-8"))?;
                println!("{}: {} examples, digest {}", out.join(name).display(), ds.len(), ds.digest());
            }
            write(&out.join("config.txt"), &cfg.to_text())?;
        }
        Command::Plot { input, out } => {
            let out = out.unwrap_or_else(|| input.join("plots"));
            for f in plot_directory(&input, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
