//! Command line and HTTP front ends for `factor_core`.

pub mod cli;
pub mod http;
pub mod jobs;
pub mod render;
