pub mod checkpoint;
pub mod config;
pub mod data;
pub mod debias;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graphs;
pub mod models;
pub mod noiselab;
pub mod substrate;
pub mod trainer;

pub use error::{Error, Result};
