//! Command implementations and the annotation service behind the `p2c` binary.

pub mod commands;
pub mod service;
