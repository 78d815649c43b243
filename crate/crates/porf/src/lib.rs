//! Camera-pose refinement toolkit: a pose residual field (an MLP shared
//! across frames that regresses pose updates) jointly optimized with an
//! SDF-based differentiable renderer, supervised by colour rendering and an
//! epipolar (Sampson) loss over 2D correspondences. Ships with a synthetic
//! benchmark harness and trajectory evaluation suite.

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod field;
pub mod harness;
pub mod image;
pub mod renderer;
pub mod trainer;
pub mod error;
pub mod epipolar;
pub mod se3;
pub mod textio;
pub mod tracked;

pub use error::{Error, Result};
