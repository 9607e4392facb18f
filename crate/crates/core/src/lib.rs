//! Trajectory-piloted action plan prediction on a seeded synthetic
//! egocentric world: trajectory-action alignment, a causal plan predictor,
//! gate-then-rank trajectory retrieval, and latent-space planning
//! diagnostics, all on a from-scratch f64 autodiff core.

pub mod alignment;
pub mod cem;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod math;
pub mod metrics;
pub mod par;
pub mod pilot;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod synthworld;

pub use error::{Error, Result};
