//! Mean-square stability and stochastic bifurcation analysis for equilibria of
//! Itô SDEs `dX = F(X) dt + G(X) dW`.
//!
//! The pipeline: find deterministic equilibria (`equilibria`), linearize with
//! affine noise and solve the second-moment ODE (`moments`), bound the
//! linearization error (`moments::compute_mu`, `dissipativity`), sweep a
//! parameter (`sweep`) and cross-check everything by Monte Carlo (`simulate`).

pub mod dissipativity;
pub mod equilibria;
pub mod error;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod simulate;
pub mod sweep;
pub mod validate;

pub use error::{AnalysisError, EquilibriumError, LinalgError, ModelError, SimError};
pub use linalg::DenseMatrix;
pub use model::{builtin, ModelConfig, ModelSpec, Sde};
