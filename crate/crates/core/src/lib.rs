pub mod cli;
pub mod config;
pub mod csi;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod ofdm;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
