//! Library surface of the `orbmag` binary: configuration, commands, and the
//! verification suite, exposed so integration tests can drive them directly.

pub mod commands;
pub mod config;
pub mod jsonfmt;
pub mod verify;
