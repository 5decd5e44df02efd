//! Desk-scale laboratory for latent-token visual reasoning.
//!
//! The crate implements, end to end, a tiny multimodal decoder whose answer
//! and prompt positions can be masked away from the image so that visual
//! information must flow through a handful of trainable latent tokens, plus
//! everything needed to train and interrogate it: a reverse-mode autodiff
//! tape, procedural perception tasks with verifiable gold answers, a
//! two-stage training protocol with ablation baselines, and diagnostics for
//! latent usage and information flow.

pub mod checkpoint;
pub mod diag;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layout;
pub mod linalg;
pub mod mask;
pub mod model;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
