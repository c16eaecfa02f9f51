//! Library surface of the command-line crate: the run-configuration
//! format shared by the binary and its integration tests.

pub mod config;
