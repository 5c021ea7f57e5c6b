//! Object removal for diffusion models by redirecting self-attention.
//!
//! The crate carries everything needed to study the method at desk scale:
//! a small tensor substrate, a DDIM scheduler, masked self-attention
//! (activation/suppression and similarity suppression), a U-shaped noise
//! predictor with hand-written gradients, redirection guidance, the
//! stochastic and deterministic inpainting pipelines, a synthetic corpus
//! with exact ground truth, attention-map analysis, and evaluation.

#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod attention;
pub mod datagen;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod exec;
pub mod guidance;
pub mod io;
pub mod numerics;
pub mod pipelines;
pub mod scheduler;

pub use error::{Error, Result};
pub use exec::Exec;
