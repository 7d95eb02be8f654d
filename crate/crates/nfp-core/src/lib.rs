//! Behavior cloning with conditional normalizing flows.
//!
//! A spline-coupling flow learns the conditional distribution of strided
//! action windows given observation histories, giving exact log-likelihoods,
//! single-pass sampling, likelihood-guided action selection, and gradients
//! of log p with respect to the action. A DDPM/DDIM baseline trains on the
//! same windowed representation for accuracy and latency comparisons, and a
//! set of deterministic toy manipulation tasks provides demonstrations and
//! rollout evaluation.

pub mod diffusion;
pub mod envs;
pub mod error;
pub mod flow;
pub mod io;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod spline;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
