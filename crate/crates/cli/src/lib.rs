//! Command-line front end and HTTP refinement server for `cortrack`.

pub mod config;
pub mod serve;
