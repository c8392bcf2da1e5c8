//! Files, configuration and the command-line runner around `kbgsat-core`.
//!
//! * [`io`] reads dataset directories and writes dictionaries and reports.
//! * [`checkpoint`] is the binary model format.
//! * [`config`] is the flat `key = value` run configuration.
//! * [`runner`] implements the subcommands; [`cli`] parses arguments.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod parallel;
pub mod report;
pub mod runner;

pub use error::{CliError, Result};
