//! Hierarchical slide classification over precomputed patch embeddings.

pub mod aggregator;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod par;
pub mod prompt_encoder;
pub mod slide_attention;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
