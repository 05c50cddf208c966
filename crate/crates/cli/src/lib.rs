//! Command-line front end and local HTTP service for the glassgpt engine.

pub mod document;
pub mod server;
pub mod source;

pub use document::{trace_prompt, TraceDocument, TRACE_VERSION};
