//! Gradient-regularized natural gradient optimizers.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense matrices, Newton–Schulz inversion, lazy inverse
//!   perturbation, spectral norms.
//! - [`model`]: a layer-wise feed-forward network that exposes the per-layer
//!   inputs and backpropagated errors the Kronecker factors are built from.
//! - [`fisher`]: activation/error factor estimation, RING/RENG/Tikhonov
//!   damping and the factored natural-gradient direction.
//! - [`optim`]: SGD, an adaptive baseline, NGD, RING and RENG steps with lazy
//!   factor refresh and Levenberg–Marquardt damping.
//! - [`kalman`]: the diagonal-covariance regularized Kalman optimizer.
//! - [`oracle`]: brute-force reference computations and the output-space
//!   convergence experiment.
//! - [`harness`]: datasets, configs, the training loop, metrics and the CLI.

pub mod fisher;
pub mod harness;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod optim;

pub use linalg::Mat;
