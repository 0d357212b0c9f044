//! Command-line harness, file formats and experiment configuration around
//! `deftx-core`.

pub mod cli;
pub mod config;
pub mod harness;
pub mod manifest;
pub mod report;
pub mod store;
pub mod sweep;
