//! Library side of the `cssr` command: configuration and the run drivers the
//! subcommands call.

pub mod config;
pub mod run;

pub use config::RunConfig;
pub use run::{run_training, Failure, TrainOutcome};
