//! File formats, fixture bundles, benchmarking and the `ovd` command line
//! on top of [`ovd_core`].

pub mod bankfile;
pub mod bench;
pub mod cli;
pub mod coco;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod ovdt;
pub mod report;
pub mod session;
pub mod synth;

pub use error::{Error, Result};
