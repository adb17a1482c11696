//! Acceptance suite. Prints one `ACn PASS|FAIL` line per criterion with the
//! measured numbers, then exits non-zero if any criterion failed.
//!
//! Runs as a plain binary (`harness = false`) so its report is never captured.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use fusionlab::compare::{compare_fusions, CompareOptions, VariantChoice, TEXT_ONLY};
use fusionlab::config::ExperimentConfig;
use fusionlab::train::{init_from_checkpoint, train, train_from, TrainOptions};
use fusionlab_core::attention::{AttentionParams, CrossBlock, Linear, Mlp, TransformerBlock};
use fusionlab_core::costmodel::{self, count_fusion, count_model, count_model_at};
use fusionlab_core::fusion::{CombineOp, Fusion, FusionSpec, FusionVariant, Modality, TokenSequence};
use fusionlab_core::gradcheck::{check, GradCheckConfig, DEFAULT_REL_TOL};
use fusionlab_core::model::{is_encoder_param, Head, Model, ModelSpec};
use fusionlab_core::params::{Graph, ParamBuilder, ParamStore};
use fusionlab_core::tape::Var;
use fusionlab_core::tasks::{
    evaluate, exact_match, generate_dataset, vqa_accuracy, Object, SyntheticImage, TaskConfig, TaskKind, Vocab,
};
use fusionlab_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> Result<T>) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        f(&mut pb).expect("build")
    };
    (t, store)
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.insert(format!("x{i}"), Tensor::randn(s, 1.0, &mut rng)).unwrap();
    }
    store
}

fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.tape.shape(out).to_vec();
    let r = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.tape.mul(out, r)?;
    g.tape.sum(p)
}

fn random_seq(g: &mut Graph, seed: u64, rows: usize, cols: usize) -> Var {
    g.constant(Tensor::randn(&[rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Gradient-checks `f` over every parameter at the default 1e-3 relative
/// tolerance; returns the number of scalars checked.
fn gradcheck(name: &str, store: &ParamStore, max_per_param: Option<usize>, f: impl Fn(&mut Graph) -> Result<Var>) -> std::result::Result<usize, String> {
    let cfg = GradCheckConfig {
        max_per_param,
        ..GradCheckConfig::default()
    };
    let r = ok(check(store, |_| true, cfg, f))?;
    ensure!(r.checked > 0, "{name}: nothing checked");
    ensure!(
        r.passed(),
        "{name}: {}/{} mismatched, first {:?}",
        r.failures.len(),
        r.checked,
        r.failures.first()
    );
    Ok(r.checked)
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn tape_ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let mask = vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0];
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, x| g.tape.matmul(x[0], x[1]))),
        ("transpose", vec![vec![3, 5]], Box::new(|g, x| g.tape.transpose(x[0]))),
        ("reshape", vec![vec![2, 6]], Box::new(|g, x| g.tape.reshape(x[0], &[3, 4]))),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, x| g.tape.add(x[0], x[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, x| g.tape.mul(x[0], x[1]))),
        ("scale", vec![vec![4, 2]], Box::new(|g, x| g.tape.scale(x[0], -1.7))),
        ("scale_by", vec![vec![3, 3], vec![1]], Box::new(|g, x| g.tape.scale_by(x[0], x[1]))),
        ("add_row", vec![vec![5, 3], vec![3]], Box::new(|g, x| g.tape.add_row(x[0], x[1]))),
        ("softmax", vec![vec![3, 5]], Box::new(|g, x| g.tape.softmax(x[0]))),
        ("causal_softmax", vec![vec![4, 4]], Box::new(|g, x| g.tape.causal_softmax(x[0]))),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|g, x| g.tape.layernorm(x[0], x[1], x[2], 1e-5))),
        ("gelu", vec![vec![4, 5]], Box::new(|g, x| g.tape.gelu(x[0]))),
        ("relu", vec![vec![4, 5]], Box::new(|g, x| g.tape.relu(x[0]))),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|g, x| g.tape.concat_cols(&[x[0], x[1]]))),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], Box::new(|g, x| g.tape.concat_rows(&[x[0], x[1]]))),
        ("slice_cols", vec![vec![3, 6]], Box::new(|g, x| g.tape.slice_cols(x[0], 2, 3))),
        ("slice_rows", vec![vec![5, 2]], Box::new(|g, x| g.tape.slice_rows(x[0], 1, 3))),
        ("embedding", vec![vec![6, 4]], Box::new(|g, x| g.tape.embedding(x[0], &[3, 0, 3, 5]))),
        ("mean_rows", vec![vec![4, 3]], Box::new(|g, x| g.tape.mean_rows(x[0]))),
        ("sum", vec![vec![3, 3]], Box::new(|g, x| g.tape.sum(x[0]))),
        ("cross_entropy", vec![vec![3, 5]], Box::new(|g, x| g.tape.cross_entropy(x[0], &[4, 0, 2]))),
        ("dropout", vec![vec![2, 3]], Box::new(move |g, x| g.tape.dropout(x[0], mask.clone()))),
    ]
}

fn small_fusion_spec(variant: FusionVariant, op: CombineOp, d: usize, heads: usize) -> FusionSpec {
    let mut spec = FusionSpec::new(variant, d, heads).with_combine(op);
    spec.co_attention_blocks = 1;
    spec.co_tok_rounds = 2;
    spec.co_tok_learned_tokens = 2;
    spec.co_tok_blocks_per_round = 1;
    spec.mlp_ratio = 2;
    spec
}

fn tiny_image(seed: u64, grid: (usize, usize)) -> SyntheticImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = SyntheticImage::empty(grid, seed, 0.1);
    for c in img.cells.iter_mut() {
        if rng.gen_bool(0.6) {
            *c = Some(Object {
                shape: rng.gen_range(0..4),
                color: rng.gen_range(0..4),
            });
        }
    }
    img
}

/// Fusion module with input gradients, every parameter, one seed.
fn check_fusion_grads(spec: &FusionSpec, seed: u64) -> std::result::Result<usize, String> {
    let (fusion, mut store) = build(seed, |pb| Fusion::new(pb, spec));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
    let vid = store.insert("input.vision", Tensor::randn(&[3, spec.model_dim], 1.0, &mut rng)).unwrap();
    let tid = store.insert("input.text", Tensor::randn(&[2, spec.model_dim], 1.0, &mut rng)).unwrap();
    gradcheck(&format!("{}/{}", spec.variant, spec.combine_op), &store, None, |g| {
        let v = TokenSequence::new(g.param(vid), Modality::Vision);
        let t = TokenSequence::new(g.param(tid), Modality::Text);
        let out = fusion.forward(g, &v, &t)?;
        weighted_sum(g, out.tokens, seed)
    })
}

/// The full pipeline at d=8, vocab=11, N=3 image tokens, M=2 question tokens.
fn check_model_grads(variant: FusionVariant, op: CombineOp, seed: u64) -> std::result::Result<usize, String> {
    let mut spec = ModelSpec::with_depth(variant, 8, 2, 11, (1, 3), 3);
    spec.mlp_ratio = 2;
    spec.decoder_blocks = 1;
    spec.fusion = small_fusion_spec(variant, op, 8, 2);
    spec.max_text_len = 4;
    spec.max_answer_len = 2;
    let (model, store) = ok(Model::new(spec, seed))?;
    let img = tiny_image(seed, (1, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 9);
    let question: Vec<usize> = (0..2).map(|_| rng.gen_range(3..11)).collect();
    let answer = vec![rng.gen_range(3..11)];
    gradcheck(&format!("model/{variant}/{op}"), &store, Some(6), |g| {
        model.forward_generative(g, &img, &question, &answer)
    })
}

fn ac1() -> Outcome {
    let mut checked = 0;
    let ops = tape_ops();
    for (name, shapes, op) in &ops {
        for seed in SEEDS {
            let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            let store = inputs(seed, &shapes);
            checked += gradcheck(name, &store, None, |g| {
                let xs: Vec<Var> = store.ids().map(|id| g.param(id)).collect();
                let out = op(g, &xs)?;
                weighted_sum(g, out, seed)
            })?;
        }
    }
    for seed in SEEDS {
        let (attn, store) = build(seed, |pb| AttentionParams::new(pb, "attn", 8, 8, 8, 4));
        for causal in [false, true] {
            checked += gradcheck("attention", &store, None, |g| {
                let x = random_seq(g, seed + 7, 4, 8);
                let c = if causal { x } else { random_seq(g, seed + 8, 3, 8) };
                let out = attn.forward(g, x, c, causal)?;
                weighted_sum(g, out, seed)
            })?;
        }
        let (block, store) = build(seed, |pb| TransformerBlock::new(pb, "b", 8, 2, 2));
        checked += gradcheck("block", &store, None, |g| {
            let x = random_seq(g, seed + 3, 5, 8);
            let y = block.forward(g, x)?;
            weighted_sum(g, y, seed)
        })?;
        let (cross, store) = build(seed, |pb| CrossBlock::new(pb, "x", 8, 2, 2, true, true));
        checked += gradcheck("cross block", &store, None, |g| {
            let x = random_seq(g, seed + 1, 3, 8);
            let c = random_seq(g, seed + 2, 4, 8);
            let y = cross.forward(g, x, c)?;
            weighted_sum(g, y, seed)
        })?;
    }
    for &v in FusionVariant::ALL {
        for seed in SEEDS {
            checked += check_fusion_grads(&small_fusion_spec(v, CombineOp::ChannelConcat, 8, 2), seed)?;
            checked += check_model_grads(v, CombineOp::ChannelConcat, seed)?;
        }
    }
    Ok(format!(
        "{} tape ops + attention/blocks + {} fusion variants end-to-end, {} seeds, {checked} scalars within rel {DEFAULT_REL_TOL}",
        ops.len(),
        FusionVariant::ALL.len(),
        SEEDS.len()
    ))
}

fn fused_shape(spec: &FusionSpec, n: usize, m: usize, seed: u64) -> std::result::Result<Vec<usize>, String> {
    let (f, store) = build(seed, |pb| Fusion::new(pb, spec));
    let mut g = Graph::new(&store);
    let d = spec.model_dim;
    let v = TokenSequence::new(random_seq(&mut g, seed + 1, n, d), Modality::Vision);
    let t = TokenSequence::new(random_seq(&mut g, seed + 2, m, d), Modality::Text);
    let out = ok(f.forward(&mut g, &v, &t))?;
    ensure!(g.tape.value(out.tokens).is_finite(), "non-finite fused tokens");
    Ok(g.tape.shape(out.tokens).to_vec())
}

fn ac2() -> Outcome {
    let reference = [
        (FusionVariant::CompoundTokens, vec![81, 768]),
        (FusionVariant::CompoundTokensTaq, vec![32, 768]),
        (FusionVariant::MergedAttention, vec![81, 768]),
    ];
    for (v, want) in &reference {
        let got = fused_shape(&FusionSpec::new(*v, 768, 12), 49, 32, 0)?;
        ensure!(&got == want, "{v}: got {got:?}, want {want:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 48;
    for case in 0..cases {
        let n = rng.gen_range(1..=64);
        let m = rng.gen_range(1..=32);
        let d = 2 * rng.gen_range(2..=32);
        let heads = if d % 4 == 0 { 2 } else { 1 };
        for v in [FusionVariant::CompoundTokens, FusionVariant::CompoundTokensTaq, FusionVariant::MergedAttention] {
            let spec = FusionSpec::new(v, d, heads);
            let got = fused_shape(&spec, n, m, case)?;
            let want = vec![spec.output_len(n, m), d];
            let rule = if v == FusionVariant::CompoundTokensTaq { m } else { n + m };
            ensure!(got == want && want[0] == rule, "{v} N={n} M={m} d={d}: got {got:?}");
        }
    }
    Ok(format!("compound 81x768, TAQ 32x768, merged 81x768; {cases} random (N, M, even d) cases per variant"))
}

fn ac3() -> Outcome {
    let mut checked = 0;
    for &op in CombineOp::ALL {
        for v in [FusionVariant::CompoundTokens, FusionVariant::CompoundTokensTaq] {
            for seed in SEEDS {
                checked += check_fusion_grads(&small_fusion_spec(v, op, 8, 2), seed)?;
            }
            checked += check_model_grads(v, op, 1)?;
        }
    }
    let totals: Vec<(CombineOp, u64, u64)> = CombineOp::ALL
        .iter()
        .map(|&op| {
            let mut s = ModelSpec::with_depth(FusionVariant::CompoundTokens, 768, 12, 3130, (7, 7), 12);
            s.fusion = s.fusion.with_combine(op);
            let r = count_model(&s);
            (op, r.total_flops, r.total_params)
        })
        .collect();
    let lo = totals.iter().map(|t| t.1).min().unwrap() as f64;
    let hi = totals.iter().map(|t| t.1).max().unwrap() as f64;
    let spread = hi / lo - 1.0;
    ensure!(spread < 0.01, "flop spread {:.4}% >= 1%: {totals:?}", spread * 100.0);
    let plo = totals.iter().map(|t| t.2).min().unwrap() as f64;
    let phi = totals.iter().map(|t| t.2).max().unwrap() as f64;
    Ok(format!(
        "4 ops gradient-checked ({checked} scalars); flop spread {:.3}% (< 1%), param spread {:.3}% at d=768",
        spread * 100.0,
        (phi / plo - 1.0) * 100.0
    ))
}

fn measure(store: &ParamStore, shapes: &[(usize, usize)], f: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>) -> std::result::Result<u64, String> {
    let mut g = Graph::new(store);
    let xs: Vec<Var> = shapes.iter().enumerate().map(|(i, &(r, c))| random_seq(&mut g, i as u64, r, c)).collect();
    let before = g.tape.flops();
    ok(f(&mut g, &xs))?;
    Ok(g.tape.flops() - before)
}

fn ac4() -> Outcome {
    let mut exact = 0;
    let mut cmp = |what: &str, measured: u64, analytic: u64| -> std::result::Result<(), String> {
        ensure!(measured == analytic, "{what}: instrumented {measured} vs analytic {analytic}");
        exact += 1;
        Ok(())
    };
    for (i, o, t) in [(2, 3, 1), (4, 16, 3), (16, 5, 7)] {
        let (lin, store) = build(0, |pb| Linear::new(pb, "l", i, o, true));
        cmp("linear", measure(&store, &[(t, i)], |g, x| lin.forward(g, x[0]))?, costmodel::count_linear(i, o, t).flops)?;
    }
    for (d, heads) in [(4, 1), (4, 2), (16, 4)] {
        let (a, store) = build(0, |pb| AttentionParams::new(pb, "a", d, d, d, heads));
        cmp("self-attention", measure(&store, &[(3, d)], |g, x| a.forward(g, x[0], x[0], false))?, costmodel::count_attention(3, 3, d, heads).flops)?;
        cmp("causal attention", measure(&store, &[(5, d)], |g, x| a.forward(g, x[0], x[0], true))?, costmodel::count_attention(5, 5, d, heads).flops)?;
        cmp("cross-attention", measure(&store, &[(5, d), (9, d)], |g, x| a.forward(g, x[0], x[1], false))?, costmodel::count_attention(5, 9, d, heads).flops)?;
    }
    let (mlp, store) = build(0, |pb| Mlp::new(pb, "m", 8, 4));
    cmp("mlp", measure(&store, &[(3, 8)], |g, x| mlp.forward(g, x[0]))?, costmodel::count_mlp(8, 4, 3).flops)?;
    let (b, store) = build(0, |pb| TransformerBlock::new(pb, "b", 16, 4, 2));
    cmp("block", measure(&store, &[(6, 16)], |g, x| b.forward(g, x[0]))?, costmodel::count_transformer_block(6, 16, 4, 2).flops)?;
    for norm_context in [false, true] {
        let (c, store) = build(0, |pb| CrossBlock::new(pb, "x", 16, 4, 2, true, norm_context));
        cmp("cross block", measure(&store, &[(4, 16), (7, 16)], |g, x| c.forward(g, x[0], x[1]))?, costmodel::count_cross_block(4, 7, 16, 4, 2, norm_context).flops)?;
    }
    for &v in FusionVariant::ALL {
        for &op in CombineOp::ALL {
            if op != CombineOp::ChannelConcat && !v.is_compound() {
                continue;
            }
            for (d, heads, n, m) in [(8, 2, 3, 2), (16, 4, 5, 4)] {
                let spec = small_fusion_spec(v, op, d, heads);
                let (f, store) = build(0, |pb| Fusion::new(pb, &spec));
                let measured = measure(&store, &[(n, d), (m, d)], |g, x| {
                    let vs = TokenSequence::new(x[0], Modality::Vision);
                    let ts = TokenSequence::new(x[1], Modality::Text);
                    f.forward(g, &vs, &ts).map(|o| o.tokens)
                })?;
                cmp(&format!("fusion {v}/{op}"), measured, count_fusion(&spec, n, m).flops)?;
                ensure!(store.numel() as u64 == count_fusion(&spec, n, m).params, "{v}/{op} params");
            }
        }
    }
    for &v in FusionVariant::ALL {
        for head in [Head::Decoder, Head::LinearClassifier { num_classes: 5 }] {
            let mut spec = ModelSpec::with_depth(v, 16, 2, 60, (2, 2), 4);
            spec.fusion = small_fusion_spec(v, CombineOp::ChannelConcat, 16, 2);
            spec.head = head;
            let (model, store) = ok(Model::new(spec.clone(), 3))?;
            let img = tiny_image(3, (2, 2));
            let q = [5, 6, 7];
            let dec = [1, 9];
            let mut g = Graph::new(&store);
            match head {
                Head::Decoder => {
                    ok(model.forward_generative(&mut g, &img, &q, &dec[1..]))?;
                }
                Head::LinearClassifier { .. } => {
                    ok(model.forward_classify(&mut g, &img, &q))?;
                }
            }
            let report = count_model_at(&spec, q.len(), dec.len());
            // Teacher forcing adds the loss on top of the forward pass.
            let loss_flops = match head {
                Head::Decoder => 5 * dec.len() as u64 * spec.vocab_size as u64,
                Head::LinearClassifier { .. } => 0,
            };
            cmp(&format!("model {v} {head:?}"), g.tape.flops() - loss_flops, report.total_flops)?;
            ensure!(report.total_params == store.numel() as u64, "model {v} params");
        }
    }

    let post_encoder = |v| {
        let mut s = ModelSpec::with_depth(v, 768, 12, 3130, (7, 7), 0);
        s.num_encoder_blocks = 0;
        s.decoder_blocks = 12;
        let r = count_model(&s);
        r.total_flops - r.stage_flops(&[costmodel::IMAGE_ENCODER, costmodel::TEXT_ENCODER])
    };
    let taq = post_encoder(FusionVariant::CompoundTokensTaq);
    let merged = post_encoder(FusionVariant::MergedAttention);
    let compound = post_encoder(FusionVariant::CompoundTokens);
    ensure!(taq < merged && merged < compound, "ordering violated: TAQ {taq}, merged {merged}, compound {compound}");
    let twelve = |v| {
        let mut s = ModelSpec::with_depth(v, 768, 12, 3130, (7, 7), 12);
        s.num_encoder_blocks = 12;
        count_model(&s).total_flops
    };
    let overhead = twelve(FusionVariant::CompoundTokens) as f64 / twelve(FusionVariant::MergedAttention) as f64 - 1.0;
    ensure!(overhead > 0.0 && overhead < 0.05, "compound overhead {:.2}% not in (0, 5%)", overhead * 100.0);
    Ok(format!(
        "{exact} exact instrumented matches; N=49 M=32 d=768: TAQ {:.2} < merged {:.2} < compound {:.2} GFLOPs; overhead with 12-block encoder {:.2}% (< 5%)",
        taq as f64 / 1e9,
        merged as f64 / 1e9,
        compound as f64 / 1e9,
        overhead * 100.0
    ))
}

fn ac5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases = 256;
    for _ in 0..cases {
        let n = rng.gen_range(1..64);
        let m = rng.gen_range(1..32);
        let d = 2 * rng.gen_range(2..64);
        let l = rng.gen_range(0..13);
        let stage = |v| {
            let mut s = ModelSpec::with_depth(v, d, 1, 60, (n, 1), 0);
            s.num_encoder_blocks = l;
            s.max_text_len = m;
            count_model(&s).component(costmodel::MULTIMODAL_ENCODER).unwrap().flops
        };
        let (a, b) = (stage(FusionVariant::MergedAttention), stage(FusionVariant::CompoundTokens));
        ensure!(a == b, "N={n} M={m} d={d} L={l}: merged {a} vs compound {b}");
    }
    Ok(format!("{cases} random (N, M, d, L) cases: encoder-stage flops identical"))
}

fn memorization_config(variant: FusionVariant) -> ExperimentConfig {
    ExperimentConfig::from_pairs([
        ("seed", "11"),
        ("model.dim", "32"),
        ("model.heads", "4"),
        ("model.blocks", "2"),
        ("model.decoder_blocks", "1"),
        ("model.fusion.variant", variant.as_str()),
        ("task.kind", "spatial_relation"),
        ("task.grid", "3x3"),
        ("task.train_size", "8"),
        ("task.eval_split", "train"),
        ("optim.batch_size", "8"),
        ("optim.total_steps", "2000"),
        ("optim.warmup_steps", "50"),
        ("optim.base_lr", "0.003"),
        ("optim.weight_decay", "0.0"),
        ("train.eval_interval", "25"),
        ("train.stop_at_exact_match", "1.0"),
        ("train.deterministic", "true"),
    ])
    .expect("memorization config")
}

fn quiet() -> TrainOptions {
    TrainOptions {
        quiet: true,
        ..Default::default()
    }
}

fn ac6() -> Outcome {
    let mut detail = Vec::new();
    for &v in FusionVariant::ALL {
        let cfg = memorization_config(v);
        let a = ok(train(&cfg, &quiet()))?;
        ensure!(
            a.summary.exact_match == 1.0,
            "{v}: exact match {} after {} steps",
            a.summary.exact_match,
            a.summary.steps_completed
        );
        ensure!(a.summary.steps_completed <= 2000, "{v}: needed {} steps", a.summary.steps_completed);
        let b = ok(train(&cfg, &quiet()))?;
        ensure!(a.summary.checksum == b.summary.checksum, "{v}: checksums differ across identical runs");
        detail.push(format!("{v}@{}", a.summary.steps_completed));
    }
    Ok(format!("exact match 1.0 on 8 examples at d=32, steps: {}; two-run checksums identical", detail.join(" ")))
}

fn comparison_config() -> ExperimentConfig {
    ExperimentConfig::from_pairs([
        ("model.dim", "32"),
        ("model.heads", "4"),
        // Same encoder depth for every variant keeps flops matched.
        ("model.encoder_blocks", "2"),
        ("model.decoder_blocks", "1"),
        ("task.kind", "spatial_relation"),
        ("task.grid", "3x3"),
        ("task.train_size", "2000"),
        ("task.eval_size", "200"),
        ("optim.batch_size", "8"),
        ("optim.total_steps", "5000"),
        ("optim.base_lr", "0.001"),
        ("train.eval_interval", "500"),
        ("train.deterministic", "true"),
    ])
    .expect("comparison config")
}

fn out_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn ac7() -> Outcome {
    let cfg = comparison_config();
    let variants: Vec<VariantChoice> = ["merged_attention", "compound_tokens", TEXT_ONLY]
        .iter()
        .map(|v| VariantChoice::parse(v).unwrap())
        .collect();
    let out = out_root().join("comparison");
    let cmp = compare_fusions(
        &cfg,
        &variants,
        &[0, 1, 2],
        &CompareOptions {
            out_dir: Some(out.clone()),
            workers: 1,
            quiet: true,
        },
    )
    .map_err(|e| e.to_string())?;
    for line in cmp.to_text().lines() {
        println!("    {line}");
    }
    println!("    (tables and plots in {})", out.display());
    ensure!(cmp.rows.len() == 3, "expected 3 rows");
    for r in &cmp.rows {
        let model = VariantChoice::parse(&r.label).unwrap().apply(&cfg, 0).unwrap().model;
        ensure!(r.flops == count_model(&model).total_flops, "{}: flops column disagrees with the cost model", r.label);
        ensure!(r.per_seed.len() == 3, "{}: expected 3 seeds", r.label);
    }
    let text = cmp.row(TEXT_ONLY).unwrap();
    let gap = (text.exact_match_mean - cmp.chance).abs();
    ensure!(gap <= 0.05, "text-only {:.4} is {:.1} points from chance {:.4}", text.exact_match_mean, gap * 100.0, cmp.chance);
    let merged = cmp.row("merged_attention").unwrap();
    let compound = cmp.row("compound_tokens").unwrap();
    let delta = compound.exact_match_mean - merged.exact_match_mean;
    let flops_ratio = compound.flops as f64 / merged.flops as f64;
    ensure!((flops_ratio - 1.0).abs() < 0.1, "flops not matched: compound/merged = {flops_ratio:.3}");
    Ok(format!(
        "compound {:.3}±{:.3} vs merged {:.3}±{:.3} (delta {:+.1} points, observed not asserted; flops ratio {:.3}); text-only {:.3} vs chance {:.3}",
        compound.exact_match_mean,
        compound.exact_match_spread,
        merged.exact_match_mean,
        merged.exact_match_spread,
        delta * 100.0,
        flops_ratio,
        text.exact_match_mean,
        cmp.chance
    ))
}

fn ac8() -> Outcome {
    for k in 0..=10usize {
        let gold: Vec<&str> = (0..10).map(|i| if i < k { "red" } else { "blue" }).collect();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0].get(k).copied().unwrap_or(1.0);
        let got = ok(vqa_accuracy("red", &gold))?;
        ensure!(got == want, "vqa_accuracy with {k} matches: {got} != {want}");
    }
    let vocab = Vocab::new();
    let mut agreements = 0;
    for kind in [TaskKind::Attribute, TaskKind::SpatialRelation, TaskKind::Entailment3Way, TaskKind::Counting] {
        let cfg = TaskConfig::new(kind, (3, 3));
        let ids = cfg.answer_ids(&vocab);
        for ex in ok(generate_dataset(3, 50, &cfg))?.examples {
            for (class, &id) in ids.iter().enumerate() {
                ensure!((exact_match(&[id], &ex.answer) == 1) == (class == ex.answer_class), "exact match disagrees with class");
                agreements += 1;
            }
        }
    }
    let cfg = TaskConfig::new(TaskKind::Entailment3Way, (3, 3));
    let ds = ok(generate_dataset(2024, 500, &cfg))?;
    let mut spec = ModelSpec::with_depth(FusionVariant::CompoundTokens, 16, 2, vocab.len(), (3, 3), 3);
    spec.head = Head::LinearClassifier { num_classes: 3 };
    let (m, store) = ok(Model::new(spec, 21))?;
    let acc = ok(evaluate(&m, &store, &ds))?.exact_match_accuracy;
    ensure!((acc - 1.0 / 3.0).abs() <= 0.1, "untrained entailment accuracy {acc}");
    Ok(format!("vqa_accuracy exact for 0..10 matches; {agreements} exact-match/class agreements; untrained entailment {acc:.3} at n=500 (1/3 ± 0.1)"))
}

fn head_swap_config(seed: u64, head: &str, steps: &str) -> ExperimentConfig {
    ExperimentConfig::from_pairs([
        ("seed", seed.to_string().as_str()),
        ("model.dim", "32"),
        ("model.heads", "4"),
        ("model.blocks", "2"),
        ("model.decoder_blocks", "1"),
        ("model.head", head),
        ("model.fusion.variant", "compound_tokens"),
        ("task.kind", "entailment"),
        ("task.grid", "3x3"),
        ("task.train_size", "1000"),
        ("task.eval_size", "300"),
        ("optim.batch_size", "8"),
        ("optim.total_steps", steps),
        ("optim.base_lr", "0.001"),
        ("train.eval_interval", "0"),
        ("train.deterministic", "true"),
    ])
    .expect("head swap config")
}

fn ac9() -> Outcome {
    // Bit-identical encoders across the swap, for every variant.
    for &v in FusionVariant::ALL {
        let mut spec = ModelSpec::with_depth(v, 16, 2, Vocab::new().len(), (2, 2), 2);
        spec.fusion.co_tok_learned_tokens = 4;
        let (m, store) = ok(Model::new(spec, 11))?;
        let (_, swapped) = ok(m.head_swap(&store, 3, 12))?;
        ensure!(
            store.checksum_where(is_encoder_param) == swapped.checksum_where(is_encoder_param),
            "{v}: encoder changed across head_swap"
        );
    }
    let mut wins = 0;
    let mut rows = Vec::new();
    let seeds = [0u64, 1, 2];
    for &seed in &seeds {
        let dir = out_root().join(format!("head_swap/seed{seed}"));
        let pre_cfg = head_swap_config(seed, "decoder", "1500");
        let pre = ok(train(
            &pre_cfg,
            &TrainOptions {
                out_dir: Some(dir.join("generative")),
                quiet: true,
                ..Default::default()
            },
        ))?;
        let ft_cfg = head_swap_config(seed, "classifier", "500");
        let (model, params) = ok(init_from_checkpoint(&ft_cfg, &dir.join("generative/final.ckpt")))?;
        ensure!(
            params.checksum_where(is_encoder_param) == pre.params.checksum_where(is_encoder_param),
            "seed {seed}: encoder changed when loading for fine-tuning"
        );
        let ft = ok(train_from(&ft_cfg, model, params, &quiet()))?;
        let scratch = ok(train(&ft_cfg, &quiet()))?;
        let (a, b) = (ft.summary.exact_match, scratch.summary.exact_match);
        if a > b {
            wins += 1;
        }
        rows.push(format!("seed {seed}: generative {:.3} -> fine-tuned {a:.3} vs scratch {b:.3}", pre.summary.exact_match));
    }
    for r in &rows {
        println!("    {r}");
    }
    let verdict = if wins >= 2 { "fine-tune ahead" } else { "fine-tune not ahead; logged per seed above" };
    Ok(format!("encoders bit-identical for all variants; fine-tune beat scratch on {wins}/{} seeds at 500 steps ({verdict})", seeds.len()))
}

fn main() {
    // `cargo test -- <filter>` passes extra args; run everything regardless,
    // but honour `--list` so test discovery tools do not trigger a full run.
    if std::env::args().any(|a| a == "--list") {
        for i in 1..=9 {
            println!("ac{i}: test");
        }
        return;
    }
    let criteria: [(&str, &str, Option<Duration>, fn() -> Outcome); 9] = [
        ("AC1", "gradient oracle", Some(Duration::from_secs(120)), ac1),
        ("AC2", "shape contracts", Some(Duration::from_secs(60)), ac2),
        ("AC3", "combination operators", Some(Duration::from_secs(120)), ac3),
        ("AC4", "cost-model oracle", Some(Duration::from_secs(60)), ac4),
        ("AC5", "token-length invariance", Some(Duration::from_secs(1)), ac5),
        ("AC6", "training sanity", Some(Duration::from_secs(600)), ac6),
        ("AC7", "desk-scale comparison", Some(Duration::from_secs(1800)), ac7),
        ("AC8", "metric correctness", Some(Duration::from_secs(60)), ac8),
        ("AC9", "head-swap contract", None, ac9),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_budget = budget.map_or(true, |b| elapsed <= b);
        let (status, detail) = match (&result, in_budget) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over time budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        let budget = budget.map_or("no time budget".to_string(), |b| format!("budget {}s", b.as_secs()));
        println!("{id} {status} {name}: {detail} [{:.1}s, {budget}]", elapsed.as_secs_f64());
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
