//! Vision-text fusion strategies behind a single interface.
//!
//! * merged attention: token-axis concatenation, no parameters
//! * compound tokens: half-width projections, one cross-attention per
//!   direction, query and retrieval joined on channels
//! * compound tokens (TAQ): text-as-query only, output has `M` tokens
//! * co-attention: parallel per-modality blocks exchanging cross-attention
//! * co-tokenization: learned token pooling of vision, joint blocks, repeated

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, CrossBlock, LayerNorm, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamBuilder, ParamId};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
    Fused,
}

/// A `[length × dim]` token matrix on a tape, tagged with its modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn new(tokens: Var, modality: Modality) -> Self {
        Self { tokens, modality }
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[0]
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[1]
    }
}

macro_rules! snake_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    MergedAttention,
    CoAttention,
    CompoundTokens,
    CompoundTokensTaq,
    CoTokenization,
}

snake_enum!(FusionVariant {
    MergedAttention => "merged_attention",
    CoAttention => "co_attention",
    CompoundTokens => "compound_tokens",
    CompoundTokensTaq => "compound_tokens_taq",
    CoTokenization => "co_tokenization",
});

impl FusionVariant {
    pub fn is_compound(self) -> bool {
        matches!(self, FusionVariant::CompoundTokens | FusionVariant::CompoundTokensTaq)
    }
}

/// How a query token is joined with its cross-attention retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineOp {
    ChannelConcat,
    Weighting,
    Summation,
    ElementwiseProduct,
}

snake_enum!(CombineOp {
    ChannelConcat => "channel_concat",
    Weighting => "weighting",
    Summation => "summation",
    ElementwiseProduct => "elementwise_product",
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub variant: FusionVariant,
    /// Only read by the compound-token variants.
    pub combine_op: CombineOp,
    pub model_dim: usize,
    pub heads: usize,
    pub co_attention_blocks: usize,
    pub co_tok_rounds: usize,
    pub co_tok_learned_tokens: usize,
    pub co_tok_blocks_per_round: usize,
    pub mlp_ratio: usize,
}

impl FusionSpec {
    pub fn new(variant: FusionVariant, model_dim: usize, heads: usize) -> Self {
        Self {
            variant,
            combine_op: CombineOp::ChannelConcat,
            model_dim,
            heads,
            co_attention_blocks: 6,
            co_tok_rounds: 3,
            co_tok_learned_tokens: 64,
            co_tok_blocks_per_round: 4,
            mlp_ratio: 4,
        }
    }

    pub fn with_combine(mut self, op: CombineOp) -> Self {
        self.combine_op = op;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim;
        if d == 0 || self.heads == 0 {
            return Err(Error::Config("fusion dims and heads must be positive".into()));
        }
        if d % self.heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {} heads", self.heads)));
        }
        if self.variant.is_compound() {
            if d < 2 || d % 2 != 0 {
                return Err(Error::Config(format!("compound tokens need an even model dim, got {d}")));
            }
            if (d / 2) % self.heads != 0 {
                return Err(Error::Config(format!(
                    "half dim {} not divisible by {} heads",
                    d / 2,
                    self.heads
                )));
            }
        }
        if self.variant == FusionVariant::CoTokenization
            && (self.co_tok_rounds == 0 || self.co_tok_learned_tokens == 0)
        {
            return Err(Error::Config("co-tokenization needs rounds and learned tokens".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be positive".into()));
        }
        Ok(())
    }

    /// Output token count for `n` vision and `m` text tokens.
    pub fn output_len(&self, n: usize, m: usize) -> usize {
        match self.variant {
            FusionVariant::MergedAttention | FusionVariant::CoAttention | FusionVariant::CompoundTokens => n + m,
            FusionVariant::CompoundTokensTaq => m,
            FusionVariant::CoTokenization => self.co_tok_learned_tokens + m,
        }
    }
}

/// Learnable weights of `alpha * q + beta * x`.
#[derive(Clone, Debug)]
pub struct CombineScalars {
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl CombineScalars {
    /// Both scalars drawn uniformly from `[0, 1)`.
    pub fn new(pb: &mut ParamBuilder, name: &str) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            alpha: s.uniform("alpha", &[1], 0.0, 1.0)?,
            beta: s.uniform("beta", &[1], 0.0, 1.0)?,
        })
    }
}

fn check_dims(tape: &Tape, op: &'static str, a: &TokenSequence, b: &TokenSequence) -> Result<()> {
    if a.dim(tape) != b.dim(tape) {
        return Err(Error::ShapeMismatch {
            op,
            left: tape.shape(a.tokens).to_vec(),
            right: tape.shape(b.tokens).to_vec(),
        });
    }
    Ok(())
}

/// Learned `d -> d/2` map applied per token.
pub fn project_half(g: &mut Graph, proj: &Linear, seq: &TokenSequence) -> Result<TokenSequence> {
    let d = seq.dim(&g.tape);
    if d % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: g.tape.shape(seq.tokens).to_vec(),
            reason: "cannot halve an odd feature dim".into(),
        });
    }
    if proj.in_dim != d || proj.out_dim != d / 2 {
        return Err(Error::ShapeMismatch {
            op: "project_half",
            left: g.tape.shape(seq.tokens).to_vec(),
            right: vec![proj.in_dim, proj.out_dim],
        });
    }
    Ok(TokenSequence::new(proj.forward(g, seq.tokens)?, seq.modality))
}

/// Joins a query sequence with a retrieval of equal shape.
pub fn combine(
    g: &mut Graph,
    query: Var,
    retrieved: Var,
    op: CombineOp,
    scalars: Option<&CombineScalars>,
) -> Result<Var> {
    if g.tape.shape(query) != g.tape.shape(retrieved) {
        return Err(Error::ShapeMismatch {
            op: "combine",
            left: g.tape.shape(query).to_vec(),
            right: g.tape.shape(retrieved).to_vec(),
        });
    }
    match (op, scalars) {
        (CombineOp::Weighting, None) => Err(Error::Config("weighting needs alpha/beta scalars".into())),
        (CombineOp::Weighting, Some(s)) => {
            let alpha = g.param(s.alpha);
            let beta = g.param(s.beta);
            let a = g.tape.scale_by(query, alpha)?;
            let b = g.tape.scale_by(retrieved, beta)?;
            g.tape.add(a, b)
        }
        (_, Some(_)) => Err(Error::Config(format!("{op} takes no scalars"))),
        (CombineOp::ChannelConcat, None) => g.tape.concat_cols(&[query, retrieved]),
        (CombineOp::Summation, None) => g.tape.add(query, retrieved),
        (CombineOp::ElementwiseProduct, None) => g.tape.mul(query, retrieved),
    }
}

/// Cross-attends `query_seq` over `context_seq` and combines the result with
/// the queries. Output length always equals the query length.
pub fn compound(
    g: &mut Graph,
    attn: &AttentionParams,
    query_seq: &TokenSequence,
    context_seq: &TokenSequence,
    op: CombineOp,
    scalars: Option<&CombineScalars>,
) -> Result<TokenSequence> {
    check_dims(&g.tape, "compound", query_seq, context_seq)?;
    let retrieved = attn.forward(g, query_seq.tokens, context_seq.tokens, false)?;
    let out = combine(g, query_seq.tokens, retrieved, op, scalars)?;
    Ok(TokenSequence::new(out, Modality::Fused))
}

/// Token-axis concatenation `[vision; text]`.
pub fn fuse_merged(g: &mut Graph, vision: &TokenSequence, text: &TokenSequence) -> Result<TokenSequence> {
    check_dims(&g.tape, "fuse_merged", vision, text)?;
    let out = g.tape.concat_rows(&[vision.tokens, text.tokens])?;
    Ok(TokenSequence::new(out, Modality::Fused))
}

#[derive(Clone, Debug)]
pub struct CompoundLayers {
    pub proj_vision: Linear,
    pub proj_text: Linear,
    /// Vision tokens query text (`Î`). Absent in the TAQ variant.
    pub vision_query: Option<AttentionParams>,
    /// Text tokens query vision (`T̂`).
    pub text_query: AttentionParams,
    pub vision_scalars: Option<CombineScalars>,
    pub text_scalars: Option<CombineScalars>,
    pub combine_op: CombineOp,
}

impl CompoundLayers {
    fn new(pb: &mut ParamBuilder, spec: &FusionSpec, text_only_query: bool) -> Result<Self> {
        let d = spec.model_dim;
        let h = d / 2;
        let weighting = spec.combine_op == CombineOp::Weighting;
        Ok(Self {
            proj_vision: Linear::new(pb, "proj_vision", d, h, true)?,
            proj_text: Linear::new(pb, "proj_text", d, h, true)?,
            vision_query: if text_only_query {
                None
            } else {
                Some(AttentionParams::new(pb, "vision_query", h, h, h, spec.heads)?)
            },
            text_query: AttentionParams::new(pb, "text_query", h, h, h, spec.heads)?,
            vision_scalars: if weighting && !text_only_query {
                Some(CombineScalars::new(pb, "vision_scalars")?)
            } else {
                None
            },
            text_scalars: if weighting {
                Some(CombineScalars::new(pb, "text_scalars")?)
            } else {
                None
            },
            combine_op: spec.combine_op,
        })
    }

    /// Both directions; `(N+M) × d` for channel concat, `(N+M) × d/2` otherwise.
    pub fn fuse_compound_tokens(
        &self,
        g: &mut Graph,
        vision: &TokenSequence,
        text: &TokenSequence,
    ) -> Result<TokenSequence> {
        check_dims(&g.tape, "fuse_compound_tokens", vision, text)?;
        let vision_attn = self
            .vision_query
            .as_ref()
            .ok_or_else(|| Error::Config("layers were built for the text-as-query variant".into()))?;
        let v_half = project_half(g, &self.proj_vision, vision)?;
        let t_half = project_half(g, &self.proj_text, text)?;
        let i_cmpd = compound(g, vision_attn, &v_half, &t_half, self.combine_op, self.vision_scalars.as_ref())?;
        let t_cmpd = compound(g, &self.text_query, &t_half, &v_half, self.combine_op, self.text_scalars.as_ref())?;
        let out = g.tape.concat_rows(&[i_cmpd.tokens, t_cmpd.tokens])?;
        Ok(TokenSequence::new(out, Modality::Fused))
    }

    /// Text-as-query only; `M × d` for channel concat.
    pub fn fuse_compound_taq(
        &self,
        g: &mut Graph,
        vision: &TokenSequence,
        text: &TokenSequence,
    ) -> Result<TokenSequence> {
        check_dims(&g.tape, "fuse_compound_taq", vision, text)?;
        let v_half = project_half(g, &self.proj_vision, vision)?;
        let t_half = project_half(g, &self.proj_text, text)?;
        compound(g, &self.text_query, &t_half, &v_half, self.combine_op, self.text_scalars.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct CoAttentionLayers {
    pub vision_blocks: Vec<CrossBlock>,
    pub text_blocks: Vec<CrossBlock>,
}

impl CoAttentionLayers {
    /// Both branches update in parallel from the other branch's previous
    /// tokens; returns `(vision, text)` with shapes preserved.
    pub fn fuse_co_attention(
        &self,
        g: &mut Graph,
        vision: &TokenSequence,
        text: &TokenSequence,
    ) -> Result<(TokenSequence, TokenSequence)> {
        check_dims(&g.tape, "fuse_co_attention", vision, text)?;
        let (mut v, mut t) = (vision.tokens, text.tokens);
        for (vb, tb) in self.vision_blocks.iter().zip(&self.text_blocks) {
            let v_next = vb.forward(g, v, t)?;
            let t_next = tb.forward(g, t, v)?;
            v = v_next;
            t = t_next;
        }
        Ok((
            TokenSequence::new(v, Modality::Vision),
            TokenSequence::new(t, Modality::Text),
        ))
    }
}

#[derive(Clone, Debug)]
pub struct CoTokenRound {
    pub ln_select: LayerNorm,
    /// Per-token logits for each learned slot, `d -> slots`.
    pub selector: Linear,
    pub blocks: Vec<TransformerBlock>,
}

#[derive(Clone, Debug)]
pub struct CoTokenizationLayers {
    pub rounds: Vec<CoTokenRound>,
    pub learned_tokens: usize,
}

impl CoTokenizationLayers {
    /// Pools `vision[N×d]` into `slots × d`; each slot is a softmax-weighted
    /// (over the token axis) average of vision tokens, conditioned on the
    /// mean of the current text tokens.
    pub fn learn_tokens(&self, g: &mut Graph, round: &CoTokenRound, vision: Var, text: Var) -> Result<Var> {
        let cond = g.tape.mean_rows(text)?;
        let x = g.tape.add_row(vision, cond)?;
        let x = round.ln_select.forward(g, x)?;
        let logits = round.selector.forward(g, x)?;
        let per_slot = g.tape.transpose(logits)?;
        let weights = g.tape.softmax(per_slot)?;
        g.tape.matmul(weights, vision)
    }

    pub fn fuse_co_tokenization(
        &self,
        g: &mut Graph,
        vision: &TokenSequence,
        text: &TokenSequence,
    ) -> Result<TokenSequence> {
        check_dims(&g.tape, "fuse_co_tokenization", vision, text)?;
        let m = text.len(&g.tape);
        let mut t = text.tokens;
        let mut joint = t;
        for round in &self.rounds {
            let learned = self.learn_tokens(g, round, vision.tokens, t)?;
            joint = g.tape.concat_rows(&[learned, t])?;
            for b in &round.blocks {
                joint = b.forward(g, joint)?;
            }
            t = g.tape.slice_rows(joint, self.learned_tokens, m)?;
        }
        Ok(TokenSequence::new(joint, Modality::Fused))
    }
}

#[derive(Clone, Debug)]
pub enum FusionLayers {
    Merged,
    Compound(CompoundLayers),
    CoAttention(CoAttentionLayers),
    CoTokenization(CoTokenizationLayers),
}

/// A fusion module: parameters for one [`FusionSpec`].
#[derive(Clone, Debug)]
pub struct Fusion {
    pub spec: FusionSpec,
    pub layers: FusionLayers,
    /// Maps `d/2`-wide combine outputs back to `d`; only for non-concat ops.
    pub reproject: Option<Linear>,
}

impl Fusion {
    pub fn new(pb: &mut ParamBuilder, spec: &FusionSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.model_dim;
        let mut s = pb.scope("fusion");
        let layers = match spec.variant {
            FusionVariant::MergedAttention => FusionLayers::Merged,
            FusionVariant::CompoundTokens => FusionLayers::Compound(CompoundLayers::new(&mut s, spec, false)?),
            FusionVariant::CompoundTokensTaq => FusionLayers::Compound(CompoundLayers::new(&mut s, spec, true)?),
            FusionVariant::CoAttention => {
                let mut vision_blocks = Vec::new();
                let mut text_blocks = Vec::new();
                for i in 0..spec.co_attention_blocks {
                    vision_blocks.push(CrossBlock::new(&mut s, &format!("vision.{i}"), d, spec.heads, spec.mlp_ratio, false, true)?);
                    text_blocks.push(CrossBlock::new(&mut s, &format!("text.{i}"), d, spec.heads, spec.mlp_ratio, false, true)?);
                }
                FusionLayers::CoAttention(CoAttentionLayers { vision_blocks, text_blocks })
            }
            FusionVariant::CoTokenization => {
                let mut rounds = Vec::new();
                for r in 0..spec.co_tok_rounds {
                    let mut rs = s.scope(&format!("round{r}"));
                    let ln_select = LayerNorm::new(&mut rs, "ln_select", d)?;
                    let selector = Linear::new(&mut rs, "selector", d, spec.co_tok_learned_tokens, true)?;
                    let blocks = (0..spec.co_tok_blocks_per_round)
                        .map(|b| TransformerBlock::new(&mut rs, &format!("block{b}"), d, spec.heads, spec.mlp_ratio))
                        .collect::<Result<Vec<_>>>()?;
                    rounds.push(CoTokenRound { ln_select, selector, blocks });
                }
                FusionLayers::CoTokenization(CoTokenizationLayers {
                    rounds,
                    learned_tokens: spec.co_tok_learned_tokens,
                })
            }
        };
        let reproject = if spec.variant.is_compound() && spec.combine_op != CombineOp::ChannelConcat {
            Some(Linear::new(&mut s, "reproject", d / 2, d, true)?)
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            layers,
            reproject,
        })
    }

    /// Fuses both modalities into a `[tokens × d]` sequence ready for the
    /// multimodal encoder.
    pub fn forward(&self, g: &mut Graph, vision: &TokenSequence, text: &TokenSequence) -> Result<TokenSequence> {
        let fused = match &self.layers {
            FusionLayers::Merged => fuse_merged(g, vision, text)?,
            FusionLayers::Compound(c) => match self.spec.variant {
                FusionVariant::CompoundTokensTaq => c.fuse_compound_taq(g, vision, text)?,
                _ => c.fuse_compound_tokens(g, vision, text)?,
            },
            FusionLayers::CoAttention(c) => {
                let (v, t) = c.fuse_co_attention(g, vision, text)?;
                let out = g.tape.concat_rows(&[v.tokens, t.tokens])?;
                TokenSequence::new(out, Modality::Fused)
            }
            FusionLayers::CoTokenization(c) => c.fuse_co_tokenization(g, vision, text)?,
        };
        match &self.reproject {
            Some(r) => Ok(TokenSequence::new(r.forward(g, fused.tokens)?, Modality::Fused)),
            None => Ok(fused),
        }
    }
}
