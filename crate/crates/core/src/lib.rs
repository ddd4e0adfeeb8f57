//! Dual-level collaborative transformer for image captioning.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
