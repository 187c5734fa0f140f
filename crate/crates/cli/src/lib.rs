//! File formats, tables and subcommand bodies for the `routelens` tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod labels;
pub mod prompts;
pub mod routing_log;
pub mod tables;
