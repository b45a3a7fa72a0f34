pub mod attention;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod llr;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
mod seed;
pub mod vlr;

pub use config::Config;
pub use error::{Error, Result};
pub use seed::{derive_seed, rng_for};
