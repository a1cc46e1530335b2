//! Run harness: configuration, corpora, checkpoints, and the command
//! implementations behind the `moelab` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
