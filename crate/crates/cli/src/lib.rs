//! Library side of the `fdmix` binary, split out so integration tests can
//! drive commands without spawning processes.

pub mod commands;
pub mod config;
pub mod manifest;
