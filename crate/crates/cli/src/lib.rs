//! Command-line front end for the two-lane switching simulator: scenario
//! configs, run orchestration, and the CSV/JSON file formats.

pub mod config;
pub mod output;
pub mod runner;
