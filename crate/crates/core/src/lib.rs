//! Distributional gradient matching.
//!
//! A deep-kernel Gaussian-process smoother maps `(x0, t)` to a state
//! distribution; a probabilistic dynamics model maps states to derivative
//! distributions. Both are trained jointly by minimizing the GP marginal
//! negative log-likelihood plus a squared 2-Wasserstein penalty between the
//! smoother's and the dynamics model's derivative marginals, so neither
//! training nor prediction integrates the learned vector field.

pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod linalg;
pub mod matching;
pub mod nets;
pub mod odegen;
pub mod rff;
pub mod smoother;
pub mod trainer;

pub use error::{DgmError, Result};
