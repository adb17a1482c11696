//! Softmax dot-product attention and the transformer blocks built from it.

use crate::error::{Error, Result};
use crate::fusion::TokenSequence;
use crate::params::{Graph, ParamBuilder, ParamId};
use crate::tape::{Tape, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Affine map `x W + b` applied per token.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.normal("w", &[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt())?;
        let b = if bias { Some(s.zeros("b", &[out_dim])?) } else { None };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            gamma: s.ones("gamma", &[dim])?,
            beta: s.zeros("beta", &[dim])?,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layernorm(x, gamma, beta, LAYERNORM_EPS)
    }
}

/// Whether queries are drawn from the context sequence itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

impl AttentionKind {
    pub fn of(queries: Var, context: Var) -> Self {
        if queries == context {
            AttentionKind::SelfAttention
        } else {
            AttentionKind::CrossAttention
        }
    }
}

/// `softmax(q kᵀ / sqrt(d)) v` for `q[N×d]`, `k[M×d]`, `v[M×c]`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    let vs = tape.shape(v).to_vec();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::ShapeMismatch {
            op: "attention q/k",
            left: qs,
            right: ks,
        });
    }
    if vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::ShapeMismatch {
            op: "attention k/v",
            left: ks,
            right: vs,
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    let weights = if causal {
        tape.causal_softmax(scores)?
    } else {
        tape.softmax(scores)?
    };
    tape.matmul(weights, v)
}

/// Projections for multi-head attention. `inner_dim = num_heads * head_dim`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        inner_dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if num_heads == 0 || inner_dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {inner_dim} not divisible into {num_heads} heads"
            )));
        }
        let mut s = pb.scope(name);
        Ok(Self {
            w_q: Linear::new(&mut s, "q", query_dim, inner_dim, true)?,
            w_k: Linear::new(&mut s, "k", context_dim, inner_dim, true)?,
            w_v: Linear::new(&mut s, "v", context_dim, inner_dim, true)?,
            w_o: Linear::new(&mut s, "o", inner_dim, query_dim, true)?,
            num_heads,
            head_dim: inner_dim / num_heads,
        })
    }

    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn num_params(&self) -> usize {
        self.w_q.num_params() + self.w_k.num_params() + self.w_v.num_params() + self.w_o.num_params()
    }

    /// Attention of `queries[N×dq]` over `context[M×dc]`, output `N×dq`.
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var, causal: bool) -> Result<Var> {
        let q = self.w_q.forward(g, queries)?;
        let k = self.w_k.forward(g, context)?;
        let v = self.w_v.forward(g, context)?;
        let heads = if self.num_heads == 1 {
            scaled_dot_attention(&mut g.tape, q, k, v, causal)?
        } else {
            let mut outs = Vec::with_capacity(self.num_heads);
            for h in 0..self.num_heads {
                let start = h * self.head_dim;
                let qh = g.tape.slice_cols(q, start, self.head_dim)?;
                let kh = g.tape.slice_cols(k, start, self.head_dim)?;
                let vh = g.tape.slice_cols(v, start, self.head_dim)?;
                outs.push(scaled_dot_attention(&mut g.tape, qh, kh, vh, causal)?);
            }
            g.tape.concat_cols(&outs)?
        };
        self.w_o.forward(g, heads)
    }
}

/// Multi-head attention over token sequences; output keeps the query modality.
pub fn multi_head_attention(
    g: &mut Graph,
    params: &AttentionParams,
    queries: &TokenSequence,
    context: &TokenSequence,
) -> Result<TokenSequence> {
    let dq = queries.dim(&g.tape);
    if dq != params.w_q.in_dim || context.dim(&g.tape) != params.w_k.in_dim {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            left: g.tape.shape(queries.tokens).to_vec(),
            right: g.tape.shape(context.tokens).to_vec(),
        });
    }
    let out = params.forward(g, queries.tokens, context.tokens, false)?;
    Ok(TokenSequence::new(out, queries.modality))
}

/// Two-layer perceptron with GELU, hidden width `ratio * dim`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            fc1: Linear::new(&mut s, "fc1", dim, dim * ratio, true)?,
            fc2: Linear::new(&mut s, "fc2", dim * ratio, dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        self.fc2.forward(g, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

/// Pre-norm residual block: `x + MHA(LN x)`, then `+ MLP(LN ·)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: AttentionParams,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            ln_attn: LayerNorm::new(&mut s, "ln_attn", dim)?,
            attn: AttentionParams::new(&mut s, "attn", dim, dim, dim, heads)?,
            ln_mlp: LayerNorm::new(&mut s, "ln_mlp", dim)?,
            mlp: Mlp::new(&mut s, "mlp", dim, mlp_ratio)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_masked(g, x, false)
    }

    pub fn forward_masked(&self, g: &mut Graph, x: Var, causal: bool) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, causal)?;
        let a = g.dropout(a)?;
        let x = g.tape.add(x, a)?;
        let h = self.ln_mlp.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        let m = g.dropout(m)?;
        g.tape.add(x, m)
    }

    pub fn num_params(&self) -> usize {
        4 * self.ln_attn.dim + self.attn.num_params() + self.mlp.num_params()
    }
}

/// Applies a stack of blocks in order.
pub fn transformer_stack(g: &mut Graph, blocks: &[TransformerBlock], x: Var) -> Result<Var> {
    blocks.iter().try_fold(x, |x, b| b.forward(g, x))
}

/// Block with self-attention, cross-attention into a context, and an MLP,
/// each pre-norm residual. Used by the decoder (causal) and co-attention.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_self: LayerNorm,
    pub self_attn: AttentionParams,
    pub ln_query: LayerNorm,
    pub ln_context: Option<LayerNorm>,
    pub cross_attn: AttentionParams,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    pub causal: bool,
}

impl CrossBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        causal: bool,
        norm_context: bool,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            ln_self: LayerNorm::new(&mut s, "ln_self", dim)?,
            self_attn: AttentionParams::new(&mut s, "self_attn", dim, dim, dim, heads)?,
            ln_query: LayerNorm::new(&mut s, "ln_query", dim)?,
            ln_context: if norm_context {
                Some(LayerNorm::new(&mut s, "ln_context", dim)?)
            } else {
                None
            },
            cross_attn: AttentionParams::new(&mut s, "cross_attn", dim, dim, dim, heads)?,
            ln_mlp: LayerNorm::new(&mut s, "ln_mlp", dim)?,
            mlp: Mlp::new(&mut s, "mlp", dim, mlp_ratio)?,
            causal,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, context: Var) -> Result<Var> {
        let h = self.ln_self.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h, self.causal)?;
        let a = g.dropout(a)?;
        let x = g.tape.add(x, a)?;

        let q = self.ln_query.forward(g, x)?;
        let ctx = match &self.ln_context {
            Some(ln) => ln.forward(g, context)?,
            None => context,
        };
        let c = self.cross_attn.forward(g, q, ctx, false)?;
        let c = g.dropout(c)?;
        let x = g.tape.add(x, c)?;

        let h = self.ln_mlp.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        let m = g.dropout(m)?;
        g.tape.add(x, m)
    }

    pub fn num_params(&self) -> usize {
        let d = self.ln_self.dim;
        let norms = if self.ln_context.is_some() { 4 } else { 3 };
        2 * d * norms + self.self_attn.num_params() + self.cross_attn.num_params() + self.mlp.num_params()
    }
}
