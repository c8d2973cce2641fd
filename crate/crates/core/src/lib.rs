//! Sketch-to-image retrieval with multi-level tokenization, attention-guided
//! token filtering, cross-attention scoring and a precomputed retrieval index.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cross_attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod index;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use autodiff::{Graph, Var};
pub use config::{AttentionScale, ModelConfig};
pub use cross_attention::DistanceMode;
pub use data::Dataset;
pub use error::{Error, Result};
pub use index::{RankedResult, RetrievalIndex};
pub use model::Model;
pub use tensor::{Real, Tensor};
pub use tokenizer::Modality;
pub use training::{FoldSpec, TrainConfig};
