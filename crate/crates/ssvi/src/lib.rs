//! File formats, run configuration, metrics traces and the command-line
//! driver around `ssvi-core`.

pub mod config;
pub mod io;
pub mod run;
pub mod trace;

pub use ssvi_core as core;
