//! Variance-exploding SDE diffusion vocoder.
//!
//! The forward process is a driftless linear SDE whose transition densities
//! are Gaussian in closed form. A conditional score network is fit to the
//! transition scores by denoising score matching, and waveforms are drawn
//! from the prior by reverse-time Euler–Maruyama with a Langevin corrector.

pub mod config;
pub mod error;
pub mod features;
pub mod noise;
pub mod sampler;
pub mod score_net;
pub mod sde;
pub mod stats;
pub mod training;
pub mod validate;

pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
