//! Command-line entry points, configuration, dataset files and run reports.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod report;
