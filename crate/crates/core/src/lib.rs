//! Spectral algorithms and the transformers that emulate them.
//!
//! * [`linalg`]: Jacobi eigensolver, power method with deflation.
//! * [`transformer`]: ReLU-attention transformer forward pass and parameter I/O.
//! * [`construction`]: hand-built weights that run the power method and
//!   two-cluster spectral clustering inside a transformer.
//! * [`datasets`], [`gmm`], [`metrics`]: data generators, clustering, losses.
//! * [`train`]: reverse-mode gradients, gradient checking and SGD.

pub mod construction;
pub mod datasets;
pub mod gmm;
pub mod linalg;
pub mod metrics;
pub mod train;
pub mod transformer;

pub use linalg::{Mat, SpectralResult, Vector};
