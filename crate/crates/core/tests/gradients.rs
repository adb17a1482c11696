//! Tape gradients against central finite differences.

use fusionlab_core::attention::{AttentionParams, CrossBlock, TransformerBlock};
use fusionlab_core::fusion::{CombineOp, Fusion, FusionSpec, FusionVariant, Modality, TokenSequence};
use fusionlab_core::gradcheck::{check, check_all, GradCheckConfig, GradCheckReport};
use fusionlab_core::model::{Model, ModelSpec};
use fusionlab_core::params::{Graph, ParamBuilder, ParamStore};
use fusionlab_core::tape::Var;
use fusionlab_core::tasks::SyntheticImage;
use fusionlab_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn assert_passed(what: &str, seed: u64, r: &GradCheckReport) {
    assert!(r.checked > 0, "{what} (seed {seed}): nothing checked");
    assert!(
        r.passed(),
        "{what} (seed {seed}): {} of {} mismatched, first {:?}",
        r.failures.len(),
        r.checked,
        r.failures.first()
    );
}

/// Stores one random input per shape as `x0`, `x1`, ...
fn inputs(seed: u64, shapes: &[&[usize]]) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.insert(format!("x{i}"), Tensor::randn(s, 1.0, &mut rng)).unwrap();
    }
    store
}

/// `sum(out ⊙ R)` with a fixed random `R`, so every output element gets a
/// distinct upstream gradient (plain `sum` would hide softmax errors).
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.tape.shape(out).to_vec();
    let r = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.tape.mul(out, r)?;
    g.tape.sum(p)
}

fn check_op(name: &str, shapes: &[&[usize]], op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    for seed in SEEDS {
        let store = inputs(seed, shapes);
        let report = check_all(&store, |g| {
            let xs: Vec<Var> = store.ids().map(|id| g.param(id)).collect();
            let out = op(g, &xs)?;
            weighted_sum(g, out, seed)
        })
        .unwrap();
        assert_passed(name, seed, &report);
    }
}

#[test]
fn matmul() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |g, x| g.tape.matmul(x[0], x[1]));
}

#[test]
fn matmul_sum_gradient_matches() {
    for seed in SEEDS {
        let store = inputs(seed, &[&[3, 4], &[4, 2]]);
        let cfg = GradCheckConfig {
            rel_tol: 1e-4,
            ..GradCheckConfig::default()
        };
        let r = check(&store, |n| n == "x0", cfg, |g| {
            let a = g.param(store.id("x0").unwrap());
            let b = g.param(store.id("x1").unwrap());
            let m = g.tape.matmul(a, b)?;
            g.tape.sum(m)
        })
        .unwrap();
        assert_passed("matmul sum", seed, &r);
    }
}

#[test]
fn transpose_and_reshape() {
    check_op("transpose", &[&[3, 5]], |g, x| g.tape.transpose(x[0]));
    check_op("reshape", &[&[2, 6]], |g, x| {
        let r = g.tape.reshape(x[0], &[3, 4])?;
        let w = g.tape.transpose(r)?;
        g.tape.matmul(r, w)
    });
}

#[test]
fn elementwise() {
    check_op("add", &[&[3, 4], &[3, 4]], |g, x| g.tape.add(x[0], x[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |g, x| g.tape.mul(x[0], x[1]));
    check_op("mul self", &[&[2, 3]], |g, x| g.tape.mul(x[0], x[0]));
    check_op("scale", &[&[4, 2]], |g, x| g.tape.scale(x[0], -1.7));
    check_op("scale_by", &[&[3, 3], &[1]], |g, x| g.tape.scale_by(x[0], x[1]));
    check_op("add_row", &[&[5, 3], &[3]], |g, x| g.tape.add_row(x[0], x[1]));
}

#[test]
fn softmax_variants() {
    check_op("softmax", &[&[3, 5]], |g, x| g.tape.softmax(x[0]));
    check_op("causal_softmax", &[&[4, 4]], |g, x| g.tape.causal_softmax(x[0]));
}

#[test]
fn layernorm() {
    check_op("layernorm", &[&[3, 6], &[6], &[6]], |g, x| g.tape.layernorm(x[0], x[1], x[2], 1e-5));
}

#[test]
fn activations() {
    check_op("gelu", &[&[4, 5]], |g, x| g.tape.gelu(x[0]));
    check_op("relu", &[&[4, 5]], |g, x| g.tape.relu(x[0]));
}

#[test]
fn concat_and_slice() {
    check_op("concat_cols", &[&[3, 2], &[3, 4]], |g, x| g.tape.concat_cols(&[x[0], x[1]]));
    check_op("concat_rows", &[&[2, 3], &[4, 3]], |g, x| g.tape.concat_rows(&[x[0], x[1]]));
    check_op("slice_cols", &[&[3, 6]], |g, x| g.tape.slice_cols(x[0], 2, 3));
    check_op("slice_rows", &[&[5, 2]], |g, x| g.tape.slice_rows(x[0], 1, 3));
}

#[test]
fn embedding_with_repeats() {
    check_op("embedding", &[&[6, 4]], |g, x| g.tape.embedding(x[0], &[3, 0, 3, 5]));
}

#[test]
fn reductions() {
    check_op("mean_rows", &[&[4, 3]], |g, x| g.tape.mean_rows(x[0]));
    for seed in SEEDS {
        let store = inputs(seed, &[&[3, 5]]);
        let r = check_all(&store, |g| {
            let x = g.param(store.id("x0").unwrap());
            g.tape.cross_entropy(x, &[4, 0, 2])
        })
        .unwrap();
        assert_passed("cross_entropy", seed, &r);
        let r = check_all(&store, |g| {
            let x = g.param(store.id("x0").unwrap());
            let y = g.tape.mul(x, x)?;
            g.tape.sum(y)
        })
        .unwrap();
        assert_passed("sum", seed, &r);
    }
}

#[test]
fn dropout_with_fixed_mask() {
    let mask = vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0];
    check_op("dropout", &[&[2, 3]], |g, x| g.tape.dropout(x[0], mask.clone()));
}

fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> Result<T>) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        f(&mut pb).unwrap()
    };
    (t, store)
}

fn random_tokens(g: &mut Graph, seed: u64, rows: usize, cols: usize, modality: Modality) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = g.constant(Tensor::randn(&[rows, cols], 1.0, &mut rng));
    TokenSequence::new(v, modality)
}

#[test]
fn multi_head_attention_query_weights() {
    for seed in SEEDS {
        let (attn, store) = build(seed, |pb| AttentionParams::new(pb, "attn", 8, 8, 8, 2));
        let r = check(&store, |n| n.starts_with("attn.q"), GradCheckConfig::default(), |g| {
            let q = random_tokens(g, seed + 100, 3, 8, Modality::Text);
            let c = random_tokens(g, seed + 200, 2, 8, Modality::Vision);
            let out = attn.forward(g, q.tokens, c.tokens, false)?;
            g.tape.sum(out)
        })
        .unwrap();
        assert_passed("mha w_q", seed, &r);
    }
}

#[test]
fn attention_all_projections_causal() {
    for seed in SEEDS {
        let (attn, store) = build(seed, |pb| AttentionParams::new(pb, "attn", 8, 8, 8, 4));
        let r = check_all(&store, |g| {
            let x = random_tokens(g, seed + 7, 4, 8, Modality::Text);
            let out = attn.forward(g, x.tokens, x.tokens, true)?;
            weighted_sum(g, out, seed)
        })
        .unwrap();
        assert_passed("causal mha", seed, &r);
    }
}

#[test]
fn two_block_stack() {
    for seed in SEEDS {
        let (blocks, store) = build(seed, |pb| {
            Ok(vec![
                TransformerBlock::new(pb, "b0", 8, 2, 4)?,
                TransformerBlock::new(pb, "b1", 8, 2, 4)?,
            ])
        });
        let r = check_all(&store, |g| {
            let x = random_tokens(g, seed + 3, 5, 8, Modality::Fused);
            let y = fusionlab_core::attention::transformer_stack(g, &blocks, x.tokens)?;
            weighted_sum(g, y, seed)
        })
        .unwrap();
        assert_passed("transformer stack", seed, &r);
    }
}

#[test]
fn cross_block() {
    for seed in SEEDS {
        let (block, store) = build(seed, |pb| CrossBlock::new(pb, "x", 8, 2, 2, true, true));
        let r = check_all(&store, |g| {
            let x = random_tokens(g, seed + 1, 3, 8, Modality::Text);
            let c = random_tokens(g, seed + 2, 4, 8, Modality::Vision);
            let y = block.forward(g, x.tokens, c.tokens)?;
            weighted_sum(g, y, seed)
        })
        .unwrap();
        assert_passed("cross block", seed, &r);
    }
}

fn small_fusion_spec(variant: FusionVariant, op: CombineOp) -> FusionSpec {
    let mut spec = FusionSpec::new(variant, 8, 2).with_combine(op);
    spec.co_attention_blocks = 1;
    spec.co_tok_rounds = 2;
    spec.co_tok_learned_tokens = 2;
    spec.co_tok_blocks_per_round = 1;
    spec.mlp_ratio = 2;
    spec
}

/// Every fusion parameter, plus gradients flowing back into the inputs.
fn check_fusion(variant: FusionVariant, op: CombineOp) {
    for seed in SEEDS {
        let spec = small_fusion_spec(variant, op);
        let (fusion, mut store) = build(seed, |pb| Fusion::new(pb, &spec));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let vid = store.insert("input.vision", Tensor::randn(&[3, 8], 1.0, &mut rng)).unwrap();
        let tid = store.insert("input.text", Tensor::randn(&[2, 8], 1.0, &mut rng)).unwrap();
        let r = check_all(&store, |g| {
            let v = TokenSequence::new(g.param(vid), Modality::Vision);
            let t = TokenSequence::new(g.param(tid), Modality::Text);
            let out = fusion.forward(g, &v, &t)?;
            weighted_sum(g, out.tokens, seed)
        })
        .unwrap();
        assert_passed(&format!("{variant}/{op}"), seed, &r);
    }
}

#[test]
fn fusion_variants_end_to_end() {
    for &v in FusionVariant::ALL {
        check_fusion(v, CombineOp::ChannelConcat);
    }
}

#[test]
fn combine_ops_end_to_end() {
    for &op in CombineOp::ALL {
        check_fusion(FusionVariant::CompoundTokens, op);
        check_fusion(FusionVariant::CompoundTokensTaq, op);
    }
}

fn tiny_image(seed: u64, grid: (usize, usize)) -> SyntheticImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = SyntheticImage::empty(grid, seed, 0.1);
    for c in img.cells.iter_mut() {
        if rng.gen_bool(0.6) {
            *c = Some(fusionlab_core::tasks::Object {
                shape: rng.gen_range(0..4),
                color: rng.gen_range(0..4),
            });
        }
    }
    img
}

/// Whole pipeline at d=8, vocab=11, N=3, M=2 for every variant.
#[test]
fn full_model_every_variant() {
    for &variant in FusionVariant::ALL {
        for seed in SEEDS {
            let mut spec = ModelSpec::with_depth(variant, 8, 2, 11, (1, 3), 3);
            spec.mlp_ratio = 2;
            spec.decoder_blocks = 1;
            spec.fusion = small_fusion_spec(variant, CombineOp::ChannelConcat);
            spec.max_text_len = 4;
            spec.max_answer_len = 2;
            let (model, store) = Model::new(spec, seed).unwrap();
            let img = tiny_image(seed, (1, 3));
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 9);
            let question: Vec<usize> = (0..2).map(|_| rng.gen_range(3..11)).collect();
            let answer = vec![rng.gen_range(3..11)];
            let cfg = GradCheckConfig {
                max_per_param: Some(6),
                ..GradCheckConfig::default()
            };
            let r = check(&store, |_| true, cfg, |g| model.forward_generative(g, &img, &question, &answer)).unwrap();
            assert_passed(&format!("model/{variant}"), seed, &r);
        }
    }
}
