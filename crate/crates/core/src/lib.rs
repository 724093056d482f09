//! Geospatial retrieval engine for grounded street-level video generation.
//!
//! The crate mines temporally unaligned training pairs from geo-registered
//! panorama captures, plans and stitches conditioning sequences along user
//! paths, drives an autoregressive generation session against a pluggable
//! generator backend, and scores outputs with static-masked view-synthesis
//! metrics.

pub mod error;
pub mod eval_metrics;
pub mod fixtures;
pub mod geodesy;
pub mod image_buffer;
pub mod pair_miner;
pub mod pano_index;
pub mod pano_projection;
pub mod retrieval_planner;
pub mod session_engine;

pub use error::{Error, Result};
pub use image_buffer::ImageBuffer;
