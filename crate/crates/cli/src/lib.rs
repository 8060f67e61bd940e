//! Library side of the command-line front end: file formats, run
//! configuration, telemetry output and report assembly.

pub mod config;
pub mod formats;
pub mod output;
pub mod report;
