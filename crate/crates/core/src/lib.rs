//! Noise-robust classifier training with semantic-neighborhood instability
//! masking.

pub mod bench;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod masked;
pub mod neighbor;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Mode, NodeId};
pub use params::{Gradients, ParamId, ParamStore, StoreId};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore64 = ParamStore<f64>;
