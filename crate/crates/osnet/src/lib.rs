//! File formats and the command-line front end for `osnet-core`.
//!
//! * [`checkpoint`]: the versioned tensor container used for models and
//!   dataset images,
//! * [`dataset`]: datasets on disk, one directory per split,
//! * [`config`]: JSON run configurations with key-path error reporting,
//! * [`metrics`]: per-epoch CSV logs and evaluation reports,
//! * [`pgm`]: plain greyscale images for activation maps,
//! * [`gradsuite`]: the finite-difference suites of `osnet gradcheck`,
//! * [`cli`]: the subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod pgm;

pub use error::{Error, Result};
