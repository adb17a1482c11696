//! Closed-form flop and parameter counts.
//!
//! Conventions (shared with the tape's instrumented counter):
//! * matmul `[m×k]·[k×n]`: `2·m·k·n`
//! * bias add, residual add, scale, elementwise product, mean accumulation: 1 per element
//! * softmax and layer norm: 5 per element; GELU: 8 per element
//! * concat, slice, transpose, embedding lookup: free
//!
//! Multi-head attention with `q` queries over `kv` keys, model width `d` and
//! head width `d/h`:
//!
//! ```text
//! flops = (2·q·d·d + q·d)                 query projection
//!       + 2·(2·kv·d·d + kv·d)             key and value projections
//!       + 2·q·kv·d                        scores, summed over heads
//!       + h·q·kv·(1 + 5)                  1/sqrt(d_head) scaling and softmax
//!       + 2·q·kv·d                        weighted sum of values
//!       + (2·q·d·d + q·d)                 output projection
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::fusion::{CombineOp, FusionSpec, FusionVariant};
use crate::model::{Head, ModelSpec};
use crate::tape::flop_cost::{ELEMENTWISE, GELU, LAYERNORM, MAC, SOFTMAX};

/// Flops and parameters of one piece of a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub params: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            flops: self.flops + o.flops,
            params: self.params + o.params,
        }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

impl Cost {
    fn flops(flops: u64) -> Self {
        Cost { flops, params: 0 }
    }

    fn times(self, k: u64) -> Self {
        Cost {
            flops: self.flops * k,
            params: self.params * k,
        }
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// `x W + b` over `tokens` rows.
pub fn count_linear(in_dim: usize, out_dim: usize, tokens: usize) -> Cost {
    Cost {
        flops: MAC * u(tokens * in_dim * out_dim) + ELEMENTWISE * u(tokens * out_dim),
        params: u(in_dim * out_dim + out_dim),
    }
}

/// `x W` without a bias.
pub fn count_matmul(in_dim: usize, out_dim: usize, tokens: usize) -> Cost {
    Cost {
        flops: MAC * u(tokens * in_dim * out_dim),
        params: u(in_dim * out_dim),
    }
}

pub fn count_layernorm(dim: usize, tokens: usize) -> Cost {
    Cost {
        flops: LAYERNORM * u(tokens * dim),
        params: u(2 * dim),
    }
}

fn elementwise(n: usize) -> Cost {
    Cost::flops(ELEMENTWISE * u(n))
}

/// Multi-head attention where queries, context and output all have width `d`.
pub fn count_attention(q_len: usize, kv_len: usize, d: usize, heads: usize) -> Cost {
    count_attention_dims(q_len, kv_len, d, d, d, heads)
}

/// General form: query width `dq`, context width `dc`, inner width `inner`
/// split over `heads`; output returns to `dq`.
pub fn count_attention_dims(q_len: usize, kv_len: usize, dq: usize, dc: usize, inner: usize, heads: usize) -> Cost {
    let scores = MAC * u(q_len * kv_len * inner);
    let scale_softmax = u(heads * q_len * kv_len) * (ELEMENTWISE + SOFTMAX);
    let weighted = MAC * u(q_len * kv_len * inner);
    count_linear(dq, inner, q_len)
        + count_linear(dc, inner, kv_len).times(2)
        + Cost::flops(scores + scale_softmax + weighted)
        + count_linear(inner, dq, q_len)
}

pub fn count_mlp(d: usize, ratio: usize, tokens: usize) -> Cost {
    count_linear(d, d * ratio, tokens) + Cost::flops(GELU * u(tokens * d * ratio)) + count_linear(d * ratio, d, tokens)
}

/// Pre-norm self-attention block.
pub fn count_transformer_block(tokens: usize, d: usize, heads: usize, ratio: usize) -> Cost {
    count_layernorm(d, tokens)
        + count_attention(tokens, tokens, d, heads)
        + elementwise(tokens * d)
        + count_layernorm(d, tokens)
        + count_mlp(d, ratio, tokens)
        + elementwise(tokens * d)
}

/// Self-attention, cross-attention into `ctx_len` tokens, MLP.
pub fn count_cross_block(tokens: usize, ctx_len: usize, d: usize, heads: usize, ratio: usize, norm_context: bool) -> Cost {
    let ctx_norm = if norm_context { count_layernorm(d, ctx_len) } else { Cost::default() };
    count_layernorm(d, tokens)
        + count_attention(tokens, tokens, d, heads)
        + elementwise(tokens * d)
        + count_layernorm(d, tokens)
        + ctx_norm
        + count_attention(tokens, ctx_len, d, heads)
        + elementwise(tokens * d)
        + count_layernorm(d, tokens)
        + count_mlp(d, ratio, tokens)
        + elementwise(tokens * d)
}

fn count_combine(op: CombineOp, tokens: usize, width: usize) -> Cost {
    match op {
        CombineOp::ChannelConcat => Cost::default(),
        CombineOp::Weighting => Cost {
            flops: 3 * ELEMENTWISE * u(tokens * width),
            params: 2,
        },
        CombineOp::Summation | CombineOp::ElementwiseProduct => elementwise(tokens * width),
    }
}

/// Fusion stage for `n` vision and `m` text tokens.
pub fn count_fusion(spec: &FusionSpec, n: usize, m: usize) -> Cost {
    let d = spec.model_dim;
    let h = d / 2;
    let heads = spec.heads;
    let reproject = |tokens: usize| {
        if spec.combine_op == CombineOp::ChannelConcat {
            Cost::default()
        } else {
            count_linear(h, d, tokens)
        }
    };
    match spec.variant {
        FusionVariant::MergedAttention => Cost::default(),
        FusionVariant::CompoundTokens => {
            count_linear(d, h, n)
                + count_linear(d, h, m)
                + count_attention_dims(n, m, h, h, h, heads)
                + count_combine(spec.combine_op, n, h)
                + count_attention_dims(m, n, h, h, h, heads)
                + count_combine(spec.combine_op, m, h)
                + reproject(n + m)
        }
        FusionVariant::CompoundTokensTaq => {
            count_linear(d, h, n)
                + count_linear(d, h, m)
                + count_attention_dims(m, n, h, h, h, heads)
                + count_combine(spec.combine_op, m, h)
                + reproject(m)
        }
        FusionVariant::CoAttention => {
            (count_cross_block(n, m, d, heads, spec.mlp_ratio, true) + count_cross_block(m, n, d, heads, spec.mlp_ratio, true))
                .times(u(spec.co_attention_blocks))
        }
        FusionVariant::CoTokenization => {
            let s = spec.co_tok_learned_tokens;
            let round = elementwise(m * d) // mean of text tokens
                + elementwise(n * d) // conditioning add
                + count_layernorm(d, n)
                + count_linear(d, s, n)
                + Cost::flops(SOFTMAX * u(s * n))
                + Cost::flops(MAC * u(s * n * d))
                + count_transformer_block(s + m, d, heads, spec.mlp_ratio).times(u(spec.co_tok_blocks_per_round));
            round.times(u(spec.co_tok_rounds))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub name: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub components: Vec<ComponentCost>,
    pub total_flops: u64,
    pub total_params: u64,
}

pub const IMAGE_ENCODER: &str = "image_encoder";
pub const TEXT_ENCODER: &str = "text_encoder";
pub const FUSION: &str = "fusion";
pub const MULTIMODAL_ENCODER: &str = "multimodal_encoder";
pub const DECODER: &str = "decoder";
pub const CLASSIFIER: &str = "classifier";

impl CostReport {
    fn from_parts(parts: Vec<(&str, Cost)>) -> Self {
        let components: Vec<ComponentCost> = parts
            .into_iter()
            .map(|(name, c)| ComponentCost {
                name: name.to_string(),
                flops: c.flops,
                params: c.params,
            })
            .collect();
        let total_flops = components.iter().map(|c| c.flops).sum();
        let total_params = components.iter().map(|c| c.params).sum();
        Self {
            components,
            total_flops,
            total_params,
        }
    }

    pub fn component(&self, name: &str) -> Option<&ComponentCost> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Sum of the named components (missing names count as zero).
    pub fn stage_flops(&self, names: &[&str]) -> u64 {
        names.iter().filter_map(|n| self.component(n)).map(|c| c.flops).sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>16} {:>12}", "component", "flops", "params");
        for c in &self.components {
            let _ = writeln!(s, "{:<20} {:>16} {:>12}", c.name, c.flops, c.params);
        }
        let _ = writeln!(s, "{:<20} {:>16} {:>12}", "total", self.total_flops, self.total_params);
        s
    }

    /// `component,flops,params` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,flops,params\n");
        for c in &self.components {
            let _ = writeln!(s, "{},{},{}", c.name, c.flops, c.params);
        }
        let _ = writeln!(s, "total,{},{}", self.total_flops, self.total_params);
        s
    }
}

/// Cost of one example at the maximum text and answer lengths.
pub fn count_model(spec: &ModelSpec) -> CostReport {
    count_model_at(spec, spec.max_text_len, spec.max_answer_len)
}

/// Cost of one forward pass up to the head output with `text_len` question
/// tokens and `decoder_len` decoder input tokens.
pub fn count_model_at(spec: &ModelSpec, text_len: usize, decoder_len: usize) -> CostReport {
    let d = spec.model_dim;
    let heads = spec.heads;
    let ratio = spec.mlp_ratio;
    let n = spec.num_image_tokens();
    let m = text_len;

    let mut image = count_matmul(spec.patch_dim, d, n) + elementwise(n * d) + elementwise(n * d);
    image.params += u(n * d + d);
    if spec.text_only {
        image.flops = 0;
    }

    let mut text = elementwise(m * d) + elementwise(m * d)
        + count_transformer_block(m, d, heads, ratio).times(u(spec.text_encoder_blocks));
    text.params += u(spec.vocab_size * d + spec.max_text_len * d + d);

    let fusion = count_fusion(&spec.fusion, n, m);
    let t = spec.fusion.output_len(n, m);
    let encoder = count_transformer_block(t, d, heads, ratio).times(u(spec.num_encoder_blocks)) + count_layernorm(d, t);

    let head = match spec.head {
        Head::Decoder => {
            let a = decoder_len;
            let mut c = elementwise(a * d)
                + count_cross_block(a, t, d, heads, ratio, false).times(u(spec.decoder_blocks))
                + count_layernorm(d, a)
                + count_linear(d, spec.vocab_size, a);
            c.params += u(spec.vocab_size * d + (spec.max_answer_len + 1) * d);
            (DECODER, c)
        }
        Head::LinearClassifier { num_classes } => (CLASSIFIER, elementwise(t * d) + count_linear(d, num_classes, 1)),
    };

    CostReport::from_parts(vec![
        (IMAGE_ENCODER, image),
        (TEXT_ENCODER, text),
        (FUSION, fusion),
        (MULTIMODAL_ENCODER, encoder),
        head,
    ])
}
