//! Trains several fusion variants on identical data and seeds and tabulates
//! accuracy against parameters and flops.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fusionlab_core::costmodel::count_model;
use fusionlab_core::FusionVariant;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::plot::{emit_plots, LossSeries, ScatterPoint};
use crate::train::{train, MetricRow, TrainOptions};

/// Label for the text-only baseline: merged attention with the vision
/// tokens zeroed before fusion.
pub const TEXT_ONLY: &str = "text_only";

#[derive(Clone, Debug, PartialEq)]
pub struct VariantChoice {
    pub label: String,
    pub overrides: Vec<(&'static str, String)>,
}

impl VariantChoice {
    pub fn parse(name: &str) -> Result<Self> {
        let overrides = if name == TEXT_ONLY {
            vec![
                ("model.fusion.variant", FusionVariant::MergedAttention.to_string()),
                ("model.text_only", "true".to_string()),
            ]
        } else {
            let v: FusionVariant = name.parse().map_err(|e: fusionlab_core::Error| HarnessError::Config(e.to_string()))?;
            vec![("model.fusion.variant", v.to_string()), ("model.text_only", "false".to_string())]
        };
        Ok(Self {
            label: name.to_string(),
            overrides,
        })
    }

    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> Result<ExperimentConfig> {
        let seed = seed.to_string();
        let mut o: Vec<(&str, &str)> = self.overrides.iter().map(|(k, v)| (*k, v.as_str())).collect();
        o.push(("seed", &seed));
        base.with(&o)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub exact_match: f64,
    pub vqa_soft: f64,
    pub final_loss: f64,
    pub checksum: String,
    pub elapsed_secs: f64,
    pub records: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub params: u64,
    pub flops: u64,
    pub exact_match_mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub exact_match_spread: f64,
    pub vqa_soft_mean: f64,
    pub vqa_soft_spread: f64,
    /// `(seed, exact_match, vqa_soft)` in seed order.
    pub per_seed: Vec<(u64, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunResult>,
    /// Accuracy of uniform guessing over the task's answer set.
    pub chance: f64,
    pub steps: usize,
}

pub fn mean_and_spread(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Labels by mean exact match, best first; ties keep input order.
    pub fn ranking(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| self.rows[b].exact_match_mean.total_cmp(&self.rows[a].exact_match_mean));
        idx.into_iter().map(|i| self.rows[i].label.as_str()).collect()
    }

    /// Mean exact-match difference `a - b`.
    pub fn delta(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.row(a)?.exact_match_mean - self.row(b)?.exact_match_mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,params,flops,exact_match_mean,exact_match_spread,vqa_soft_mean,vqa_soft_spread,seeds,per_seed_exact_match\n",
        );
        for r in &self.rows {
            let per: Vec<String> = r.per_seed.iter().map(|(seed, em, _)| format!("{seed}:{em}")).collect();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                r.params,
                r.flops,
                r.exact_match_mean,
                r.exact_match_spread,
                r.vqa_soft_mean,
                r.vqa_soft_spread,
                r.per_seed.len(),
                per.join(";")
            )
            .unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "fusion comparison: {} steps, {} seed(s) per variant", self.steps, self.rows.first().map_or(0, |r| r.per_seed.len())).unwrap();
        writeln!(
            s,
            "{:<22} {:>10} {:>14} {:>18} {:>18}  per-seed exact match",
            "variant", "params", "flops", "exact_match", "vqa_soft"
        )
        .unwrap();
        for r in &self.rows {
            let per: Vec<String> = r.per_seed.iter().map(|(seed, em, _)| format!("s{seed}={em:.3}")).collect();
            writeln!(
                s,
                "{:<22} {:>10} {:>14} {:>9.4} ± {:<6.4} {:>9.4} ± {:<6.4}  {}",
                r.label,
                r.params,
                r.flops,
                r.exact_match_mean,
                r.exact_match_spread,
                r.vqa_soft_mean,
                r.vqa_soft_spread,
                per.join(" ")
            )
            .unwrap();
        }
        writeln!(s, "\nranking by exact match: {}", self.ranking().join(" > ")).unwrap();
        writeln!(s, "chance (uniform over answers): {:.4}", self.chance).unwrap();
        let (c, m) = (FusionVariant::CompoundTokens.as_str(), FusionVariant::MergedAttention.as_str());
        if let Some(d) = self.delta(c, m) {
            let sign = if d > 0.0 { "compound ahead" } else if d < 0.0 { "merged ahead" } else { "tied" };
            writeln!(s, "{c} - {m}: {:+.2} points exact match ({sign})", d * 100.0).unwrap();
        }
        if let Some(t) = self.row(TEXT_ONLY) {
            writeln!(s, "{TEXT_ONLY} vs chance: {:+.2} points", (t.exact_match_mean - self.chance) * 100.0).unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct CompareOptions {
    /// Root for per-run directories, tables and plots.
    pub out_dir: Option<std::path::PathBuf>,
    /// Concurrent training runs. Each run is still deterministic on its own.
    pub workers: usize,
    pub quiet: bool,
}

/// Trains every `(variant, seed)` pair from `base` and aggregates the results.
pub fn compare_fusions(base: &ExperimentConfig, variants: &[VariantChoice], seeds: &[u64], opts: &CompareOptions) -> Result<Comparison> {
    if variants.len() < 2 {
        return Err(HarnessError::Config("a comparison needs at least two variants".into()));
    }
    if seeds.is_empty() {
        return Err(HarnessError::Config("a comparison needs at least one seed".into()));
    }
    let mut labels: Vec<&str> = variants.iter().map(|v| v.label.as_str()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() != variants.len() {
        return Err(HarnessError::Config("duplicate variant in comparison".into()));
    }

    let mut jobs = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut cfg = v.apply(base, seed)?;
            if opts.workers > 1 {
                cfg = cfg.with(&[("train.threads", "1")])?;
            }
            jobs.push((v.label.clone(), seed, cfg));
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let run_job = |i: usize| -> Result<RunResult> {
        let (label, seed, cfg) = &jobs[i];
        let out_dir = opts.out_dir.as_ref().map(|d| d.join(label).join(format!("seed{seed}")));
        let t = train(
            cfg,
            &TrainOptions {
                out_dir,
                resume: None,
                quiet: opts.quiet,
            },
        )?;
        if !opts.quiet {
            eprintln!(
                "{label} seed {seed}: exact match {:.4} in {:.1}s",
                t.summary.exact_match, t.summary.elapsed_secs
            );
        }
        Ok(RunResult {
            label: label.clone(),
            seed: *seed,
            exact_match: t.summary.exact_match,
            vqa_soft: t.summary.vqa_soft,
            final_loss: t.summary.final_loss,
            checksum: t.summary.checksum,
            elapsed_secs: t.summary.elapsed_secs,
            records: t.records,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..opts.workers.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run_job(i);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let runs: Vec<RunResult> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for v in variants {
        let cfg = v.apply(base, seeds[0])?;
        let cost = count_model(&cfg.model);
        let mine: Vec<&RunResult> = runs.iter().filter(|r| r.label == v.label).collect();
        let ems: Vec<f64> = mine.iter().map(|r| r.exact_match).collect();
        let softs: Vec<f64> = mine.iter().map(|r| r.vqa_soft).collect();
        let (em_mean, em_spread) = mean_and_spread(&ems);
        let (soft_mean, soft_spread) = mean_and_spread(&softs);
        rows.push(ComparisonRow {
            label: v.label.clone(),
            params: cost.total_params,
            flops: cost.total_flops,
            exact_match_mean: em_mean,
            exact_match_spread: em_spread,
            vqa_soft_mean: soft_mean,
            vqa_soft_spread: soft_spread,
            per_seed: mine.iter().map(|r| (r.seed, r.exact_match, r.vqa_soft)).collect(),
        });
    }
    let cmp = Comparison {
        rows,
        runs,
        chance: 1.0 / base.task.task.answer_words().len() as f64,
        steps: base.optim.total_steps,
    };

    if let Some(dir) = &opts.out_dir {
        write_outputs(dir, &cmp, base)?;
    }
    Ok(cmp)
}

fn write_outputs(dir: &Path, cmp: &Comparison, base: &ExperimentConfig) -> Result<()> {
    let io = |p: &Path, e: std::io::Error| HarnessError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (name, text) in [
        ("comparison.csv", cmp.to_csv()),
        ("comparison.txt", cmp.to_text()),
        ("config.txt", base.to_text()),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io(&p, e))?;
    }
    let series: Vec<LossSeries> = cmp
        .runs
        .iter()
        .map(|r| LossSeries {
            label: format!("{}_seed{}", r.label, r.seed),
            points: r.records.iter().map(|m| (m.step, m.loss)).collect(),
        })
        .collect();
    let points: Vec<ScatterPoint> = cmp
        .rows
        .iter()
        .map(|r| ScatterPoint {
            label: r.label.clone(),
            flops: r.flops as f64,
            accuracy: r.exact_match_mean,
        })
        .collect();
    emit_plots(&dir.join("plots"), &series, &points)?;
    Ok(())
}
