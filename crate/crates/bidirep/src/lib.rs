//! File formats, run configuration and the pipeline commands built on
//! `bidirep-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod io;

pub use error::{Error, Result};
