pub mod commands;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod synth;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
