//! Stochastic forward-forward learning with a dimensionality-compression
//! goodness.
//!
//! Each convolutional block is trained locally: an input is expanded into
//! several dropout-perturbed copies and the block is pushed to map copies of
//! the same input onto a low-dimensional set (consistency) while keeping the
//! copy-averaged representations of different inputs spread out (diversity).
//! A classifier head is then trained on the frozen features.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file name the common instantiations.

mod error;

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod goodness;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Network32 = network::Network<f32>;
pub type Network64 = network::Network<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
