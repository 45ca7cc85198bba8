//! Multimodal (text + image feature map) sentiment classification.
//!
//! Text goes through a trainable embedding table and a two-layer
//! bidirectional LSTM; image feature maps are projected to token sequences
//! and encoded by a transformer. The two sequences are concatenated and
//! fused by a residual convolution, CBAM channel/spatial attention and a
//! second transformer, then pooled with additive attention into a single
//! representation that feeds both a cross-entropy head and a supervised
//! contrastive loss. Everything runs on the small reverse-mode autodiff
//! engine in [`tensor`].

pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod transformer;

pub use config::ExperimentConfig;
pub use data::{Dataset, SampleRecord};
pub use error::{Error, Result};
pub use gradcheck::{GradCheck, GradReport};
pub use metrics::Report;
pub use model::MultimodalModel;
pub use tensor::Tensor;
