pub mod config;
pub mod convergence;
mod mc;
pub mod replicate;
pub mod scenario;
pub mod table;
pub mod trace;
pub mod verify;

pub use mc::{quantile, McEstimate};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use scenario::{Report, Scenario};
use table::Format;

/// The batch commands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Filter,
    Optimize,
    Replicate,
    Verify,
    Converge,
}

/// Runs `command`; artifacts and the report go to `out` when given.
pub fn run_command(command: Command, s: &Scenario, out: Option<&Path>, format: Format) -> Result<Report> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    match command {
        Command::Simulate => scenario::simulate(s, out, format),
        Command::Filter => scenario::filter(s, out, format),
        Command::Optimize => scenario::run_scenario(s, out, format),
        Command::Replicate => replicate::run_replicate(s, out, format),
        Command::Verify => verify::run_verify(s, out),
        Command::Converge => convergence::run_converge(s, out, format),
    }
}
