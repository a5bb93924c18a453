//! Library side of the `enrichcap` command: configuration, the end-to-end
//! pipeline and the per-stage subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::PipelineConfig;
pub use error::CliError;
pub use pipeline::{run_pipeline, Pipeline, PipelineResult, QuerySpec, TruthLine};
