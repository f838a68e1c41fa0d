//! A small, self-contained deep-learning stack built around one idea: the
//! identity path of a residual block carries a trainable scalar weight, so the
//! network learns how much of the raw input to blend into each block's output
//! instead of fixing the ratio at 1:1.
//!
//! The crate provides:
//!
//! - [`tensor`]: dense `f32` tensors and the forward primitives residual
//!   networks need (matmul, conv2d, batch norm, relu, pooling, cross-entropy).
//! - [`autograd`]: a reverse-mode tape over those primitives, including the
//!   analytic backward rule for the skip weight, plus a finite-difference
//!   gradient checker.
//! - [`nn`]: residual blocks with weighted skips, the weight-sharing policies
//!   ([`nn::AdaSkipMode`]), and the compact reference model.
//! - [`optim`]: SGD and Adam.
//! - [`data`]: MNIST IDX and CIFAR-10 binary parsers, one-hot encoding,
//!   stratified subsampling, and deterministic batching.
//! - [`experiment`]: a seeded training harness with CSV metrics, weight
//!   reports, checkpoints, and a multi-mode comparison runner.
//! - [`analysis`]: within-group / between-group variance statistics over
//!   learned skip weights.
//!
//! Everything is CPU-only `f32`, deterministic for a given seed, and has no
//! framework dependencies.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod analysis;
pub mod autograd;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nhwc;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use autograd::Parameter;
pub use error::{Error, Result};
pub use tensor::Tensor;
