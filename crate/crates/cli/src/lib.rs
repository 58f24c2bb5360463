//! Command-line and HTTP front ends over the `pointprompt` library.
//!
//! Commands return their stdout text instead of printing it, so the binary,
//! the service, and the tests all see the same bytes.

pub mod commands;
pub mod service;

pub use commands::{run, Cli, Command};

/// Seed used whenever `--seed` (or a request `seed`) is absent.
pub const DEFAULT_SEED: u64 = 7;
