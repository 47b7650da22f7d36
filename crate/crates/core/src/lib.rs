//! Belief estimation, delusion classification and mitigation protocols for
//! chat-completion models.

pub mod calibrate;
pub mod client;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod grading;
pub mod noise;
pub mod pipeline;
pub mod prompts;
pub mod protocols;
pub mod records;
pub mod report;
pub mod types;

pub use error::{Error, ErrorKind, Result};
