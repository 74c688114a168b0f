//! Desk-scale score-distillation laboratory.
//!
//! Everything a sampler normally gets from a pretrained diffusion model is
//! replaced here by closed-form Gaussian-mixture oracles: exact noised
//! marginals, scores, ε-predictions, and implicit classifier posteriors.
//! On top of those sit the family of distillation update rules (SDS, CSD,
//! VSD, ASD, DDS, and the two-discriminator editing rule), a small trainable
//! residual ε-model standing in for the fake/LoRA branch, and particle or
//! warped-latent generators. Because every reference quantity is analytic,
//! each gradient and each algebraic reduction between methods can be audited
//! against finite differences or exact identities.

pub mod distill;
pub mod error;
pub mod fake_branch;
pub mod gen;
pub mod optim;
pub mod oracle;

pub use error::{Error, Result};
