//! Desk-scale diffusion nowcasting engine: gridded fields, noise schedules,
//! denoiser preconditioning, small conv nets with hand-written backprop,
//! probability-flow sampling, ensemble rollouts, and evaluation metrics.

pub mod adam;
pub mod autoencoder;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod forecast;
pub mod manifest;
pub mod network;
pub mod precond;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod toydata;
pub mod training;
pub mod volume;

pub use error::{CoreError, Result};
