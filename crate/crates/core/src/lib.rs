//! Sequential preference optimization on desk-scale models.
//!
//! Policies are aligned to several preference dimensions one round at a
//! time. Round 1 is plain DPO; round `n` adds log-ratio terms of the earlier
//! policies, read from a [`cache::LogProbCache`], so that gains on earlier
//! dimensions are kept. The crate ships an exact tabular engine used to
//! check the closed-form results, small trainable policies, synthetic data
//! generators with known latent rewards, and the experiment pipeline.

pub mod cache;
pub mod data;
pub mod datagen;
pub mod error;
pub mod models;
pub mod numeric;
pub mod objectives;
pub mod pipeline;
pub mod seed;
pub mod tabular;
pub mod verify;

pub use error::{Result, SpoError};
