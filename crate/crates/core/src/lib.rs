//! World-model-supervised locomotion learning at desk scale.
//!
//! The crate couples a minimal reverse-mode autodiff engine with an analytic
//! surrogate quadruped environment. A residual world model is fitted to
//! collected transitions, a VAE-style control policy (state-conditional prior,
//! motion-tracking and command-following encoders, motor decoder) is trained by
//! backpropagating tracking and command losses through multi-step world-model
//! rollouts, and an online fine-tuning loop adapts the policy to perturbed
//! physics. Pure-pursuit path tracking converts reference paths into twist
//! commands for evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod diagnostics;
pub mod envsim;
pub mod error;
pub mod pathcmd;
pub mod replay;
pub mod trainer;
pub mod vaepolicy;
pub mod worldmodel;

pub use error::{Error, Result};
