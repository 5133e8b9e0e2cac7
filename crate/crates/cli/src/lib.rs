//! Ingestion, project store, command line and HTTP service around
//! `songdemand_core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod ops;
pub mod render;
pub mod report;
pub mod scenario;
pub mod server;
pub mod store;

pub use error::{AppError, AppResult};
