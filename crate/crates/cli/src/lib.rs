//! Command-line front end: dataset and config parsing, report rendering.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
