//! File formats, checkpoints, run directories, evaluation and reporting on
//! top of `icdc-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod report;
pub mod run;

pub use error::{Error, Result};
