//! Config-driven front end for the `hjmfdr` library.

pub mod config;
pub mod run;

pub use config::RunConfig;
pub use run::{run, Command, Failure};
