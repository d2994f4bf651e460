//! File formats, rendering and the `milx` command line on top of
//! `milx-core`.

pub mod attribution_io;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod context;
pub mod dataset_io;
pub mod digest;
pub mod error;
pub mod explain;
pub mod generate;
pub mod outdir;
pub mod render;
pub mod train;

pub use error::{Error, Result};
