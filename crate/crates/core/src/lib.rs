//! Multimodal fusion strategies for visual question answering on a small
//! reverse-mode autodiff core.
//!
//! The building blocks are a tape ([`tape::Tape`]) over dense `f64` tensors,
//! attention and transformer blocks, five fusion variants, stub encoders with
//! generative and classifier heads, an analytic cost model and synthetic
//! grid-world QA tasks.

pub mod attention;
pub mod checkpoint;
pub mod costmodel;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use fusion::{CombineOp, FusionSpec, FusionVariant, Modality, TokenSequence};
pub use model::{Head, Model, ModelSpec};
pub use params::{Graph, ParamBuilder, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
