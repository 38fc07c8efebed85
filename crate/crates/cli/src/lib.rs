//! Library side of the `cht` command: run configuration, pool construction,
//! numerical checks and the commands themselves.

pub mod checks;
pub mod commands;
pub mod config;
pub mod data;
