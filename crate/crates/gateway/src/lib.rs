//! HTTP gateway and command line of the caravan pipeline.

pub mod api;
pub mod cli;

pub use api::{router, ApiError};
