//! HTTP service and command-line front end for the `refineir` engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod ingest;
pub mod session;

pub use api::{router, AppState};
pub use config::{Alpha, Config, CONFIG_ENV};
