//! Command-line front end for guidelab experiments.

pub mod commands;
pub mod config;
pub mod output;
pub mod plot;
