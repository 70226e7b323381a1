//! File formats, configuration, parallel execution and the command-line
//! front end around [`phswarm_core`].

pub mod cli;
pub mod commands;
pub mod config;
pub mod exec;
pub mod formats;
pub mod plot;

pub use phswarm_core as core;
