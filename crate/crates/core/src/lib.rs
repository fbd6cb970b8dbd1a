//! Text-conditioned 3D Gaussian scene generation on the CPU.
//!
//! The crate builds scenes out of 3D Gaussian splats optimized against a
//! pluggable diffusion-style noise predictor: a deterministic software
//! rasterizer with analytic gradients, multi-timestep score distillation
//! with ray-contribution filtering and reconstruction passes, staged camera
//! sampling for indoor and outdoor environments, and an orchestration layer
//! with object placement and scene editing.

pub mod camscene;
pub mod error;
pub mod fps;
pub mod gauss;
pub mod guidance;
pub mod image;
pub mod pipeline;
pub mod render;

pub use error::{Error, Result};
