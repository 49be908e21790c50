//! Text-prompted nucleus segmentation built on a small reverse-mode tensor
//! engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). Training
//! runs in `f32`; gradient checks and reference comparisons run the same code
//! in `f64`.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod head;
pub mod metrics;
pub mod mgfe;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod ppd;
pub mod scalar;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, SegmentationBatch};
pub use error::{Error, Result};
pub use metrics::{compute_metrics, ConfusionMatrix, LabelMap, MetricsReport};
pub use model::{Ablation, Model, ModelConfig};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{evaluate, train, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
