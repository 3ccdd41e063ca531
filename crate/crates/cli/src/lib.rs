//! Command implementations and the HTTP service behind the `unmask` binary.

pub mod commands;
pub mod jobs;
pub mod service;
