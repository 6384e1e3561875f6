//! Adversarial image-segmentation training kit.
//!
//! A segmentor network proposes per-class probability label maps; a critic
//! network extracts hierarchical features from input images masked by the
//! predicted and ground-truth maps. Both players share one multi-scale L1
//! objective: the critic ascends it, the segmentor descends it, and the
//! critic's weights are clipped into a fixed box after every update to keep
//! the game bounded.
//!
//! The numeric core is generic over the scalar type: training runs in `f32`,
//! gradient checking instantiates the identical code in `f64`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use graph::{BnMode, Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training-precision aliases.
pub type Tensor32 = Tensor<f32>;
pub type Graph32 = Graph<f32>;

/// Check-precision aliases.
pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
