//! Synthetic data, persistence, reports and the command-line driver.

pub mod canon;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod manifest;
pub mod report;
pub mod runs;
