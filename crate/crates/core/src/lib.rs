//! Neural disease coding from clinical notes: LSTM and causal-Transformer
//! encoders trained with language-model pretraining and an auxiliary
//! language-model loss, an attention-pooling multi-label classifier,
//! cross-hospital evaluation on a synthetic domain-shift benchmark, and
//! gradient×input keyword extraction.

pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use model::{EncoderKind, Model, ModelConfig};
pub use tensor::{Elementwise, Graph, Tensor, Var};
