pub mod data;
pub mod encoder;
pub mod error;
pub mod instance;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod postprocess;
pub mod profiler;
pub mod runtime;

pub use error::{Error, Result};
