//! File formats, checkpoints, training runs, ablations and plots on top of
//! `kmaxseg-core`. The `kmaxseg` binary exposes them as subcommands.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod plot;
pub mod run;
pub mod volume_io;

pub use error::{Error, Result};
