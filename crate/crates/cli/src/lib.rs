//! Command implementations behind the `summlab` binary, exposed as a
//! library so integration tests can drive them in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
