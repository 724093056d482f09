//! HTTP service and command line for the streetgen engine.

pub mod api;
pub mod cli;
pub mod engine;
pub mod remote;
pub mod server;
pub mod store;

pub use api::{ApiError, API_VERSION};
