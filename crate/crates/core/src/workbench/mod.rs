pub mod config;
pub mod experiment;
pub mod io;
pub mod synthetic;

pub use config::{Protocol, RunConfig};
pub use experiment::{run_experiment, Manifest, Run, Stage};
