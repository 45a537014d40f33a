//! Operator surface for sloserve: placement planning, simulated benchmarks,
//! report recomputation and a JSON-lines query service.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 infeasible
//! placement, 3 SLO budget exceeded.

pub mod commands;
pub mod config;
pub mod serve;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("infeasible placement:\n  {}", .0.join("\n  "))]
    Infeasible(Vec<String>),
    #[error("SLO budget exceeded: {0}")]
    Budget(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Budget(_) => 3,
        }
    }
}

impl From<sloserve::bench::BenchError> for CliError {
    fn from(e: sloserve::bench::BenchError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
