//! Library side of the `icl` command: configuration and command bodies.

pub mod commands;
pub mod config;
