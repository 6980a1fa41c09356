//! Artifact plumbing for the `agkit` command: run configuration, image files
//! and the command implementations.

pub mod commands;
pub mod config;
pub mod imageio;
