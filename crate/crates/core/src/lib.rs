//! Task-masked projected diffusion for procedure planning.

pub mod ablation;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod diffusion;
mod error;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod planner;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod unet;
pub mod world;

pub use error::{Error, Result};
