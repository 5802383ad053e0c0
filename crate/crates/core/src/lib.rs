//! Prototypical-network spoofing countermeasure.

pub mod config;
mod error;
pub mod features;
pub mod loss;
pub mod manifest;
pub mod net;
pub mod pipeline;
pub mod scoring;
pub mod seeds;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
