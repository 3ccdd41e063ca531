//! Absorbing-state discrete diffusion over symbolic music tokens.

pub mod checkpoint;
pub mod confounder;
pub mod diffusion;
pub mod extract;
pub mod guidance;
pub mod mask;
pub mod metrics;
pub mod midi;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod tokens;
pub mod train;
