//! Open-world skeleton action segmentation.
//!
//! A pyramid graph-convolution encoder and a temporal-efficient-upsampling
//! decoder produce per-frame logits and embeddings; a temporal clustering
//! loss and Mixup shape those embeddings during training; at test time
//! max-softmax thresholding flags novel frames, K-means groups them into
//! pseudo-classes and a Hungarian assignment maps pseudo-classes onto ground
//! truth for evaluation.

pub mod assignment;
pub mod autograd;
pub mod batch;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod skeleton;
pub mod tensor;
pub mod trainer;

pub use batch::ClassIndex;
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use model::{DecoderKind, Model, ModelConfig, Params};
pub use objectives::LossConfig;
pub use skeleton::{OpenWorldSplit, SkeletonGraph, SkeletonSequence};
pub use tensor::Tensor;
