//! Configuration and command dispatch behind the `msda-lab` binary.

pub mod commands;
pub mod config;
