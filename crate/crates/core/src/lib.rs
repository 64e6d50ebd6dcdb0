//! Communication-efficient distributed estimation and inference for
//! high-dimensional sparse Cox proportional-hazards models.
//!
//! Data is split across `K` centers that never share subject-level rows.
//! A principal center iteratively refines an L1-penalized estimate by
//! replacing its local partial-likelihood gradient with the average of the
//! per-center gradients (one `O(p)` exchange per round). On top of the
//! iterated estimate the crate provides debiased confidence intervals for
//! linear functionals, a distributed decorrelated score test, distributed
//! Breslow and kernel estimates of the baseline hazard, and a seeded
//! simulation harness for the accompanying experiments.

pub mod error;
pub mod federation;
pub mod hazard;
pub mod inference;
pub mod lasso;
pub mod simgen;
pub mod stats;
pub mod survival;

pub use error::{Error, Result};
pub use federation::{FederatedCohort, GelTrace};
pub use inference::InferenceReport;

pub use survival::SurvivalDataset;
