//! HTTP façade and command-line tools over trained model bundles.
//!
//! Every endpoint is a thin wrapper around a library call in [`api`], so the
//! service, the CLI and direct library use produce identical payloads.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod state;

pub use config::{ModelEntry, ServiceConfig, CONFIG_ENV};
pub use error::{ApiError, FieldError};
pub use state::{AppState, LoadedModel, Registry};
