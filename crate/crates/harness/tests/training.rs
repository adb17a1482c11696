use fusionlab::config::ExperimentConfig;
use fusionlab::error::{HarnessError, EXIT_NUMERIC};
use fusionlab::optim::{clip_global_norm, global_norm, lr_schedule};
use fusionlab::train::{build_datasets, metrics_from_csv, train, TrainOptions};
use proptest::prelude::*;

fn tiny(extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut pairs = vec![
        ("model.dim", "8"),
        ("model.heads", "2"),
        ("model.blocks", "2"),
        ("model.decoder_blocks", "1"),
        ("model.fusion.variant", "compound_tokens"),
        ("task.grid", "2x2"),
        ("task.kind", "counting"),
        ("task.train_size", "10"),
        ("task.eval_size", "4"),
        ("optim.batch_size", "4"),
        ("optim.total_steps", "12"),
        ("optim.warmup_steps", "3"),
        ("optim.dropout", "0.1"),
        ("train.eval_interval", "4"),
        ("train.deterministic", "true"),
    ];
    pairs.extend_from_slice(extra);
    ExperimentConfig::from_pairs(pairs).unwrap()
}

fn quiet() -> TrainOptions {
    TrainOptions {
        quiet: true,
        ..Default::default()
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[("train.checkpoint_interval", "5")]);
    let full = train(
        &cfg,
        &TrainOptions {
            out_dir: Some(dir.path().join("full")),
            quiet: true,
            ..Default::default()
        },
    )
    .unwrap();
    let resumed = train(
        &cfg,
        &TrainOptions {
            out_dir: Some(dir.path().join("resumed")),
            resume: Some(dir.path().join("full/step5.ckpt")),
            quiet: true,
        },
    )
    .unwrap();
    assert_eq!(full.summary.checksum, resumed.summary.checksum);
    assert_eq!(full.optimizer.t, resumed.optimizer.t);
    assert_eq!(full.records[5..], resumed.records[..]);
    assert_eq!(resumed.records[0].step, 6);
}

#[test]
fn same_seed_same_weights_different_seed_differs() {
    let a = train(&tiny(&[]), &quiet()).unwrap();
    let b = train(&tiny(&[]), &quiet()).unwrap();
    let c = train(&tiny(&[("seed", "1")]), &quiet()).unwrap();
    assert_eq!(a.summary.checksum, b.summary.checksum);
    assert_ne!(a.summary.checksum, c.summary.checksum);
}

#[test]
fn fast_mode_tracks_deterministic_mode() {
    let det = train(&tiny(&[]), &quiet()).unwrap();
    let fast = train(&tiny(&[("train.deterministic", "false"), ("train.threads", "3")]), &quiet()).unwrap();
    for (a, b) in det.records.iter().zip(&fast.records) {
        assert!((a.loss - b.loss).abs() < 1e-9 * a.loss.abs().max(1.0), "step {}", a.step);
    }
}

#[test]
fn outputs_and_metric_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let out = train(
        &cfg,
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            quiet: true,
            ..Default::default()
        },
    )
    .unwrap();
    for f in ["config.txt", "cost.csv", "metrics.csv", "final.ckpt", "run.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows = metrics_from_csv(&text).unwrap();
    assert_eq!(rows, out.records);
    assert!(rows.windows(2).all(|w| w[0].step < w[1].step));
    for r in &rows {
        assert_eq!(r.lr, lr_schedule(r.step, &cfg.optim));
        assert!(r.grad_norm.is_finite() && r.loss.is_finite());
        assert_eq!(r.exact_match.is_some(), r.step % 4 == 0 || r.step == 12);
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("config.txt")).unwrap(), cfg.to_text());
    assert!(std::fs::read_to_string(dir.path().join("cost.csv")).unwrap().starts_with("component,flops,params\n"));
    // The recorded digest is the digest of a freshly generated training set.
    let (train_ds, _) = build_datasets(&cfg).unwrap();
    assert_eq!(out.summary.train_digest, train_ds.digest());
}

#[test]
fn exploding_run_aborts_with_numeric_error() {
    let cfg = tiny(&[("optim.base_lr", "1e250"), ("optim.warmup_steps", "0"), ("optim.grad_clip_norm", "1e300")]);
    match train(&cfg, &quiet()) {
        Err(e @ HarnessError::NonFinite { step, .. }) => {
            assert!(step >= 1 && step <= 12);
            assert_eq!(e.exit_code(), EXIT_NUMERIC);
            assert!(e.to_string().contains(&format!("step {step}")));
        }
        Err(e) => panic!("wrong error {e}"),
        Ok(_) => panic!("run with lr 1e250 finished"),
    }
}

#[test]
fn early_stop_on_exact_match() {
    let cfg = tiny(&[("train.stop_at_exact_match", "0.0")]);
    let out = train(&cfg, &quiet()).unwrap();
    assert_eq!(out.summary.steps_completed, 4);
    assert_eq!(out.records.len(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_never_exceeds_limit(
        vals in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..6), 1..5),
        max in 1e-3f64..10.0,
    ) {
        let mut g = vals.clone();
        let pre = clip_global_norm(&mut g, max);
        prop_assert!((pre - global_norm(&vals)).abs() <= 1e-9 * pre.max(1.0));
        prop_assert!(global_norm(&g) <= max + 1e-9);
        if pre <= max {
            prop_assert_eq!(g, vals);
        }
    }

    #[test]
    fn schedule_stays_in_range(step in 0usize..20_000, warmup in 0usize..1000, cycle in 1usize..10_000) {
        let cfg = ExperimentConfig::from_pairs([
            ("optim.total_steps", "20000"),
            ("optim.warmup_steps", warmup.to_string().as_str()),
            ("optim.cycle_steps", cycle.to_string().as_str()),
        ]).unwrap();
        let lr = lr_schedule(step, &cfg.optim);
        prop_assert!((0.0..=cfg.optim.base_lr).contains(&lr));
        if step >= warmup + cycle {
            prop_assert!(lr.abs() < 1e-12);
        }
    }
}
