//! Autoencoders within flows, a matched VAE baseline, and the tooling to train and evaluate them.

pub mod aef;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod nets;
pub mod params;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
