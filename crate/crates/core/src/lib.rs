//! Laplace approximations over LoRA adapter weights.
//!
//! A small MLP whose linear layers carry low-rank adapters is fine-tuned to
//! a MAP estimate, then a Gaussian posterior over the adapter weights is
//! built from Kronecker-factored Fisher curvature and used for linearized
//! predictions.

pub mod baselines;
pub mod curvature;
pub mod error;
pub mod harness;
pub mod io;
pub mod laplace;
pub mod linalg;
pub mod lora_net;
pub mod metrics;
pub mod predict;
pub mod train;

pub use error::{Error, Result};
