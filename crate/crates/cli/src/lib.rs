//! Command-line front end: configuration, experiment commands and report
//! writers.

pub mod commands;
pub mod config;
pub mod output;
