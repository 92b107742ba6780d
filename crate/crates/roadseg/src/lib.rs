//! File formats, dataset loading, the experiment harness and the command
//! line for [`roadseg_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;

pub use error::{Result, RunError};
