//! Operational shell around the pipeline core: configuration, versioned on-disk artifacts,
//! the command implementations behind the CLI, the hyperparameter grid runner and the HTTP
//! service used by the reader workbench.

pub mod commands;
pub mod config;
pub mod grid;
pub mod render;
pub mod server;
pub mod store;
pub mod trials;
pub mod workspace;

pub use config::PipelineConfig;
pub use store::{Store, StoreError};
