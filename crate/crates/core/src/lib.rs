pub mod config;
pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod gbm;
pub mod geometry;
pub mod pipeline;
pub mod radarnet;
pub mod report;
pub mod rng;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
