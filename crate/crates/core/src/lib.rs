//! Core of the caravan pipeline engine.

pub mod collection;
pub mod domain;
pub mod engine;
pub mod error;
pub mod instrument;
pub mod linalg;
pub mod model;
pub mod preprocessing;
pub mod queue;
pub mod registry;
pub mod store;

pub use error::{Error, FieldError, Result};
