//! Desk-scale laboratory for scale-wise diffusion distillation.
//!
//! The crate trains a tiny flow-matching patch transformer on procedurally
//! generated fields, analyzes how noise masks spatial frequencies, and uses
//! that to drive progressive low-to-high resolution sampling plus the
//! distribution-matching distillation losses (MMD, DMD, GAN) that turn a
//! many-step teacher into a few-step scale-wise student.
//!
//! Start with the runnable examples (`cargo run --example <name>`), or the
//! `swdlab` binary for the end-to-end workflows.

pub mod diffusion;
pub mod distill;
pub mod evalbench;
pub mod schedule;
pub mod network;
pub mod resample;
pub mod spectral;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
