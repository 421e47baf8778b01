//! File formats, datasets, the threaded pipeline driver and the `alignkit`
//! command line, on top of `alignkit-core`.

pub use alignkit_core as core;

pub mod archive;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod parallel;
pub mod pnm;
pub mod vten;

pub use error::{Error, Result};
