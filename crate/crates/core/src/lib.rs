//! Memory-efficient temporal action localization.
//!
//! Training encodes only a random subset of each video's clips; features of
//! the remaining clips come from a per-video long-term memory that is
//! refreshed in place with the freshly encoded (gradient-stopped) features.
//! A small transformer reconciles online and cached features before a
//! one-stage anchor-based detection head.

pub mod cli;
pub mod config;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod model;
pub mod nn;
pub mod profile;
pub mod rng;
pub mod tcm;
pub mod train;
pub mod video;

pub use error::{Error, Result};
