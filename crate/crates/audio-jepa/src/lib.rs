pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod embeddings;
pub mod error;
mod fsutil;
pub mod manifest;
pub mod metrics_log;
pub mod synth;
pub mod wav;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
