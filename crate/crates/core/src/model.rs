//! Encoder stubs, fusion, multimodal encoder and output heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{transformer_stack, CrossBlock, LayerNorm, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionSpec, FusionVariant, Modality, TokenSequence};
use crate::params::{Graph, ParamBuilder, ParamId, ParamStore};
use crate::tape::Var;
use crate::tasks::{QAExample, SyntheticImage, BOS, CELL_FEATURES, EOS};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_TEXT_LEN: usize = 32;
pub const DEFAULT_MAX_ANSWER_LEN: usize = 8;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    Decoder,
    LinearClassifier { num_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_answer_len: usize,
    /// Multimodal encoder depth `L`.
    pub num_encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub text_encoder_blocks: usize,
    pub mlp_ratio: usize,
    pub head: Head,
    pub fusion: FusionSpec,
    /// `(h_tokens, w_tokens)`
    pub image_grid: (usize, usize),
    pub patch_dim: usize,
    /// Replace vision tokens by zeros before fusion.
    pub text_only: bool,
}

impl ModelSpec {
    /// Spec whose fusion plus multimodal encoder spend `total_blocks`
    /// transformer-block equivalents: compound tokens give two blocks to its
    /// cross-attentions, co-attention splits the budget across two branches,
    /// co-tokenization spreads it over its rounds.
    pub fn with_depth(
        variant: FusionVariant,
        model_dim: usize,
        heads: usize,
        vocab_size: usize,
        image_grid: (usize, usize),
        total_blocks: usize,
    ) -> Self {
        let mut fusion = FusionSpec::new(variant, model_dim, heads);
        let num_encoder_blocks = match variant {
            FusionVariant::MergedAttention => total_blocks,
            FusionVariant::CompoundTokens | FusionVariant::CompoundTokensTaq => total_blocks.saturating_sub(2),
            FusionVariant::CoAttention => {
                fusion.co_attention_blocks = (total_blocks / 2).max(1);
                0
            }
            FusionVariant::CoTokenization => {
                // 3 rounds x 4 blocks at the full 12-block budget.
                fusion.co_tok_blocks_per_round = (total_blocks / fusion.co_tok_rounds).max(1);
                if total_blocks < fusion.co_tok_rounds {
                    fusion.co_tok_rounds = total_blocks.max(1);
                }
                0
            }
        };
        Self {
            model_dim,
            heads,
            vocab_size,
            max_text_len: DEFAULT_MAX_TEXT_LEN,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
            num_encoder_blocks,
            decoder_blocks: 2,
            text_encoder_blocks: 0,
            mlp_ratio: 4,
            head: Head::Decoder,
            fusion,
            image_grid,
            patch_dim: CELL_FEATURES,
            text_only: false,
        }
    }

    pub fn num_image_tokens(&self) -> usize {
        self.image_grid.0 * self.image_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim != self.fusion.model_dim {
            return Err(Error::Config(format!(
                "model dim {} differs from fusion dim {}",
                self.model_dim, self.fusion.model_dim
            )));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!("model dim {} not divisible by {} heads", self.model_dim, self.heads)));
        }
        if self.vocab_size <= EOS || self.max_text_len == 0 || self.patch_dim == 0 || self.num_image_tokens() == 0 {
            return Err(Error::Config("vocab, text length, patch dim and grid must be positive".into()));
        }
        if let Head::LinearClassifier { num_classes: 0 } = self.head {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        self.fusion.validate()
    }
}

#[derive(Clone, Debug)]
pub struct StubImageEncoder {
    pub patch: ParamId,
    pub pos: ParamId,
    pub modality: ParamId,
    pub grid: (usize, usize),
}

impl StubImageEncoder {
    fn new(pb: &mut ParamBuilder, spec: &ModelSpec) -> Result<Self> {
        let mut s = pb.scope("image_encoder");
        let n = spec.num_image_tokens();
        Ok(Self {
            patch: s.normal("patch", &[spec.patch_dim, spec.model_dim], 1.0 / (spec.patch_dim as f64).sqrt())?,
            pos: s.normal("pos", &[n, spec.model_dim], EMBED_STD)?,
            modality: s.zeros("modality", &[spec.model_dim])?,
            grid: spec.image_grid,
        })
    }

    /// One token per grid cell: patch embedding plus 2-D position and modality bias.
    pub fn encode_image(&self, g: &mut Graph, image: &SyntheticImage) -> Result<TokenSequence> {
        if image.grid != self.grid {
            return Err(Error::GridMismatch {
                expected: self.grid,
                got: image.grid,
            });
        }
        let feats = g.constant(image.features());
        let patch = g.param(self.patch);
        let x = g.tape.matmul(feats, patch)?;
        let pos = g.param(self.pos);
        let x = g.tape.add(x, pos)?;
        let modality = g.param(self.modality);
        let x = g.tape.add_row(x, modality)?;
        Ok(TokenSequence::new(x, Modality::Vision))
    }
}

#[derive(Clone, Debug)]
pub struct StubTextEncoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub modality: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl StubTextEncoder {
    fn new(pb: &mut ParamBuilder, spec: &ModelSpec) -> Result<Self> {
        let mut s = pb.scope("text_encoder");
        let d = spec.model_dim;
        let embed = s.normal("embed", &[spec.vocab_size, d], 1.0)?;
        let pos = s.normal("pos", &[spec.max_text_len, d], EMBED_STD)?;
        let modality = s.zeros("modality", &[d])?;
        let blocks = (0..spec.text_encoder_blocks)
            .map(|i| TransformerBlock::new(&mut s, &format!("block{i}"), d, spec.heads, spec.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed,
            pos,
            modality,
            blocks,
            max_len: spec.max_text_len,
            vocab_size: spec.vocab_size,
        })
    }

    pub fn encode_text(&self, g: &mut Graph, ids: &[usize]) -> Result<TokenSequence> {
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![0],
                reason: "empty question".into(),
            });
        }
        if ids.len() > self.max_len {
            return Err(Error::LengthOverflow {
                len: ids.len(),
                max: self.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab: self.vocab_size,
            });
        }
        let table = g.param(self.embed);
        let x = g.tape.embedding(table, ids)?;
        let pos = g.param(self.pos);
        let pos = g.tape.slice_rows(pos, 0, ids.len())?;
        let x = g.tape.add(x, pos)?;
        let modality = g.param(self.modality);
        let x = g.tape.add_row(x, modality)?;
        let x = transformer_stack(g, &self.blocks, x)?;
        Ok(TokenSequence::new(x, Modality::Text))
    }
}

/// Autoregressive decoder with causal self-attention and cross-attention
/// into the multimodal encoder output.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<CrossBlock>,
    pub norm: LayerNorm,
    pub lm_head: Linear,
    pub max_positions: usize,
}

impl Decoder {
    fn new(pb: &mut ParamBuilder, spec: &ModelSpec) -> Result<Self> {
        let mut s = pb.scope("decoder");
        let d = spec.model_dim;
        let max_positions = spec.max_answer_len + 1;
        Ok(Self {
            embed: s.normal("embed", &[spec.vocab_size, d], 1.0)?,
            pos: s.normal("pos", &[max_positions, d], EMBED_STD)?,
            blocks: (0..spec.decoder_blocks)
                .map(|i| CrossBlock::new(&mut s, &format!("block{i}"), d, spec.heads, spec.mlp_ratio, true, false))
                .collect::<Result<Vec<_>>>()?,
            norm: LayerNorm::new(&mut s, "norm", d)?,
            lm_head: Linear::new(&mut s, "lm_head", d, spec.vocab_size, true)?,
            max_positions,
        })
    }

    /// Next-token logits `[len × vocab]` for the decoder input `ids`.
    pub fn logits(&self, g: &mut Graph, memory: Var, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.max_positions {
            return Err(Error::LengthOverflow {
                len: ids.len(),
                max: self.max_positions,
            });
        }
        let table = g.param(self.embed);
        let x = g.tape.embedding(table, ids)?;
        let pos = g.param(self.pos);
        let pos = g.tape.slice_rows(pos, 0, ids.len())?;
        let mut x = g.tape.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, x, memory)?;
        }
        let x = self.norm.forward(g, x)?;
        self.lm_head.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub enum HeadLayers {
    Decoder(Decoder),
    Classifier(Linear),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub image_encoder: StubImageEncoder,
    pub text_encoder: StubTextEncoder,
    pub fusion: Fusion,
    pub encoder_blocks: Vec<TransformerBlock>,
    pub encoder_norm: LayerNorm,
    pub head: HeadLayers,
}

/// Parameter path prefixes per component, in allocation order.
pub const IMAGE_ENCODER_PREFIX: &str = "image_encoder.";
pub const TEXT_ENCODER_PREFIX: &str = "text_encoder.";
pub const FUSION_PREFIX: &str = "fusion.";
pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const CLASSIFIER_PREFIX: &str = "classifier.";

impl Model {
    /// Allocates a fresh model; all randomness comes from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<(Self, ParamStore)> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let image_encoder = StubImageEncoder::new(&mut pb, &spec)?;
        let text_encoder = StubTextEncoder::new(&mut pb, &spec)?;
        let fusion = Fusion::new(&mut pb, &spec.fusion)?;
        let (encoder_blocks, encoder_norm) = {
            let mut s = pb.scope("encoder");
            let blocks = (0..spec.num_encoder_blocks)
                .map(|i| TransformerBlock::new(&mut s, &format!("block{i}"), spec.model_dim, spec.heads, spec.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            (blocks, LayerNorm::new(&mut s, "norm", spec.model_dim)?)
        };
        let head = match spec.head {
            Head::Decoder => HeadLayers::Decoder(Decoder::new(&mut pb, &spec)?),
            Head::LinearClassifier { num_classes } => {
                HeadLayers::Classifier(Linear::new(&mut pb, "classifier", spec.model_dim, num_classes, true)?)
            }
        };
        Ok((
            Self {
                spec,
                image_encoder,
                text_encoder,
                fusion,
                encoder_blocks,
                encoder_norm,
                head,
            },
            store,
        ))
    }

    /// Copies every tensor from `src` whose path and shape exist in `dst`.
    /// Returns the number of tensors copied.
    pub fn copy_matching(src: &ParamStore, dst: &mut ParamStore, keep: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        let targets: Vec<(ParamId, String)> = dst.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in targets {
            if !keep(&name) {
                continue;
            }
            if let Some(sid) = src.id(&name) {
                let t = src.get(sid);
                if t.shape() != dst.get(id).shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} vs {:?}",
                        t.shape(),
                        dst.get(id).shape()
                    )));
                }
                *dst.get_mut(id) = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn encode_image(&self, g: &mut Graph, image: &SyntheticImage) -> Result<TokenSequence> {
        self.image_encoder.encode_image(g, image)
    }

    pub fn encode_text(&self, g: &mut Graph, ids: &[usize]) -> Result<TokenSequence> {
        self.text_encoder.encode_text(g, ids)
    }

    /// Both encoders, fusion, `L` encoder blocks and final norm.
    pub fn encode(&self, g: &mut Graph, image: &SyntheticImage, question: &[usize]) -> Result<TokenSequence> {
        let vision = if self.spec.text_only {
            if image.grid != self.spec.image_grid {
                return Err(Error::GridMismatch {
                    expected: self.spec.image_grid,
                    got: image.grid,
                });
            }
            let zeros = g.constant(Tensor::zeros(&[self.spec.num_image_tokens(), self.spec.model_dim]));
            TokenSequence::new(zeros, Modality::Vision)
        } else {
            self.encode_image(g, image)?
        };
        let text = self.encode_text(g, question)?;
        let fused = self.fusion.forward(g, &vision, &text)?;
        let x = transformer_stack(g, &self.encoder_blocks, fused.tokens)?;
        let x = self.encoder_norm.forward(g, x)?;
        Ok(TokenSequence::new(x, Modality::Fused))
    }

    fn decoder(&self) -> Result<&Decoder> {
        match &self.head {
            HeadLayers::Decoder(d) => Ok(d),
            HeadLayers::Classifier(_) => Err(Error::WrongHead("model has a classifier head, not a decoder".into())),
        }
    }

    /// Teacher-forced token cross-entropy of `answer` followed by the end token.
    pub fn forward_generative(
        &self,
        g: &mut Graph,
        image: &SyntheticImage,
        question: &[usize],
        answer: &[usize],
    ) -> Result<Var> {
        if answer.len() > self.spec.max_answer_len {
            return Err(Error::LengthOverflow {
                len: answer.len(),
                max: self.spec.max_answer_len,
            });
        }
        let decoder = self.decoder()?;
        let memory = self.encode(g, image, question)?;
        let mut input = Vec::with_capacity(answer.len() + 1);
        input.push(BOS);
        input.extend_from_slice(answer);
        let mut target = answer.to_vec();
        target.push(EOS);
        let logits = decoder.logits(g, memory.tokens, &input)?;
        g.tape.cross_entropy(logits, &target)
    }

    /// Greedy decoding until the end token or `max_len` tokens.
    pub fn generate(&self, params: &ParamStore, image: &SyntheticImage, question: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let decoder = self.decoder()?;
        let max_len = max_len.min(decoder.max_positions);
        let mut out = Vec::new();
        if max_len == 0 {
            return Ok(out);
        }
        let mut g = Graph::new(params);
        let memory = self.encode(&mut g, image, question)?;
        let mut input = vec![BOS];
        while out.len() < max_len {
            let logits = decoder.logits(&mut g, memory.tokens, &input)?;
            let t = g.tape.value(logits);
            let next = argmax(t.row(t.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            input.push(next);
        }
        Ok(out)
    }

    /// Mean-pooled encoder output through the linear classifier: `[1 × classes]`.
    pub fn forward_classify(&self, g: &mut Graph, image: &SyntheticImage, question: &[usize]) -> Result<Var> {
        let HeadLayers::Classifier(classifier) = &self.head else {
            return Err(Error::WrongHead("model has a decoder head, not a classifier".into()));
        };
        let memory = self.encode(g, image, question)?;
        let pooled = g.tape.mean_rows(memory.tokens)?;
        classifier.forward(g, pooled)
    }

    /// Training loss for one example under the configured head.
    pub fn loss(&self, g: &mut Graph, ex: &QAExample) -> Result<Var> {
        match self.spec.head {
            Head::Decoder => self.forward_generative(g, &ex.image, &ex.question, &ex.answer),
            Head::LinearClassifier { .. } => {
                let logits = self.forward_classify(g, &ex.image, &ex.question)?;
                g.tape.cross_entropy(logits, &[ex.answer_class])
            }
        }
    }

    /// Predicted answer tokens. For a classifier, `answer_ids[class]` maps the
    /// argmax class back to its token.
    pub fn predict(&self, params: &ParamStore, ex: &QAExample, answer_ids: &[usize]) -> Result<Vec<usize>> {
        match self.spec.head {
            Head::Decoder => self.generate(params, &ex.image, &ex.question, self.spec.max_answer_len + 1),
            Head::LinearClassifier { num_classes } => {
                if answer_ids.len() != num_classes {
                    return Err(Error::WrongHead(format!(
                        "classifier has {num_classes} classes but the task has {} answers",
                        answer_ids.len()
                    )));
                }
                let mut g = Graph::new(params);
                let logits = self.forward_classify(&mut g, &ex.image, &ex.question)?;
                Ok(vec![answer_ids[argmax(g.tape.value(logits).values())]])
            }
        }
    }

    /// Replaces the decoder by a freshly initialized linear classifier,
    /// carrying every other parameter over unchanged.
    pub fn head_swap(&self, params: &ParamStore, num_classes: usize, seed: u64) -> Result<(Model, ParamStore)> {
        self.decoder()?;
        let mut spec = self.spec.clone();
        spec.head = Head::LinearClassifier { num_classes };
        let (model, mut store) = Model::new(spec, seed)?;
        Model::copy_matching(params, &mut store, |n| !n.starts_with(CLASSIFIER_PREFIX))?;
        Ok((model, store))
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Paths that belong to everything upstream of the output head.
pub fn is_encoder_param(name: &str) -> bool {
    !name.starts_with(DECODER_PREFIX) && !name.starts_with(CLASSIFIER_PREFIX)
}
