//! Variance-minimisation policy optimisation on desk-scale diffusion chains.
//!
//! The crate provides tabular and Gaussian toy denoising chains, the full
//! family of alignment losses (variance-minimisation, clipped surrogates,
//! GRPO, detailed balance, gradient matching), SMC weight machinery, a
//! rollout/update trainer, and an oracle harness that checks the analytic
//! identities by exact enumeration.

pub mod cli;
pub mod core;
pub mod error;
pub mod gaussian;
pub mod objectives;
pub mod smc;
pub mod tabular;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
