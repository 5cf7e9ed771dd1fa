//! Pipeline orchestration for the `symlevel` command-line tool.

pub mod commands;
pub mod config;
pub mod plots;
pub mod stage;
