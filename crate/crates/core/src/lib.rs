//! Contrastive flow matching with partition-exclusive and physics-perturbed
//! negatives, on a toy conditional-trajectory world.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: interpolants and target velocities.
//! - [`toyworld`]: bouncing-ball simulator, physics scorer and dataset files.
//! - [`condition`]: frozen condition encoder, k-means partitions, macro
//!   (partition-exclusive) and micro (single-axis perturbation) negatives.
//! - [`model`]: the conditional velocity MLP with hand-derived gradients.
//! - [`objectives`]: flow-matching, contrastive and anchoring losses.
//! - [`geometry`]: gradient-conflict decomposition and alignment reports.
//! - [`sampler`]: Euler ODE sampling with optional guidance.
//! - [`trainer`]: AdamW, the two-stage training loop and evaluation.

pub mod condition;
pub mod error;
pub mod geometry;
pub mod hashing;
pub mod model;
pub mod objectives;
pub mod sampler;
pub mod schedule;
pub mod toyworld;
pub mod trainer;
pub mod vecops;

pub use error::{Error, Result};
