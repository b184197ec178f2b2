//! Library side of the `emai` command: strict run configs, command
//! implementations and checksum manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
