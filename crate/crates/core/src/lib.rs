//! Jointly sparse spatial/Winograd CNN training, universal compression and
//! dual-domain sparse inference.
//!
//! The numeric modules are generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below pin the double-precision types that training and compression use.

pub mod compressor;
pub mod deploy;
pub mod error;
pub mod nn;
pub mod scalar;
pub mod sparsity;
pub mod tensor;
pub mod winograd;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Matrix = tensor::Matrix<f64>;
pub type WinogradBasis = winograd::WinogradBasis<f64>;
pub type Network = nn::Network<f64>;
pub type Dataset = nn::Dataset<f64>;
pub type TrainBatch = nn::TrainBatch<f64>;
pub type SparsityConfig = sparsity::SparsityConfig<f64>;
pub type RegularizerState = sparsity::RegularizerState<f64>;
pub use compressor::QuantizedModel;
pub type WinogradDeployment = deploy::WinogradDeployment<f64>;

pub type TensorF32 = tensor::Tensor<f32>;
pub type MatrixF32 = tensor::Matrix<f32>;
pub type WinogradBasisF32 = winograd::WinogradBasis<f32>;
