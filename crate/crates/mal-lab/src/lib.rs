//! Std companion to `mal-core`: file formats, configuration, checkpoint
//! I/O, the experiment pipeline, and report rendering. The `mal` binary
//! in this crate is the user-facing surface.

pub mod ckpt;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;

pub use error::{LabError, Result};
