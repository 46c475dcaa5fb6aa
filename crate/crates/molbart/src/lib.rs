//! File formats, run orchestration and the `molbart` command line on top
//! of `molbart-core`.

pub mod checkpoint;
pub mod config;
pub mod dedup;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::RunDir;
