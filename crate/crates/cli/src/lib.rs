//! Config-driven operator commands for steerhoi.

pub mod config;
pub mod experiment;
pub mod plot;

pub use config::RunConfig;
