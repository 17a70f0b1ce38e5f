//! Self-distribution distillation (S2D) and hierarchical distribution
//! distillation (H2D): single models that predict Dirichlet (or Gaussian
//! over log-Dirichlet) distributions and decompose predictive uncertainty
//! into data and knowledge parts.

pub mod data;
pub mod decomposition;
pub mod dirichlet;
pub mod ensemble;
pub mod error;
pub mod gaussian;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod predict;
pub mod rng;
pub mod specfun;
pub mod tape;
pub mod training;

pub use decomposition::Decomposition;
pub use error::{Error, Result};
