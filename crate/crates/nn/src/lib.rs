//! Minimal CPU neural-network substrate: dense tensors, layers with explicit
//! backward passes, sequential networks and first-order optimizers.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Models train in
//! `f32`; finite-difference checks run the same code in `f64`.

pub mod error;
pub mod layers;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{NnError, Result};
pub use layers::{conv_output_len, BatchNorm2d, Conv2d, Layer, Linear, Mode, Param, Pass};
pub use network::Sequential;
pub use optim::{cosine_lr, Adam, AdamConfig, Sgd, SgdConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Sequential32 = Sequential<f32>;
pub type Sequential64 = Sequential<f64>;
