//! Incremental neural signed-distance mapping from depth images.

pub mod app;
pub mod error;
pub mod evalout;
pub mod fusion;
mod io_util;
pub mod mlpfield;
pub mod sampling;
pub mod scene;
pub mod spatial;
pub mod trainer;

pub use error::{Error, Result};
