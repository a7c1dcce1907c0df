//! Subcommands of the `arl` binary as library functions, so tests can drive
//! them without spawning processes.

pub mod commands;
pub mod config;

use std::fmt;

use arl_core::ArlError;

pub use config::{DataSource, Precision, RunConfig};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Arl(ArlError),
    /// Gradient check ran but at least one comparison exceeded tolerance.
    GradCheck(String),
}

impl Failure {
    /// 2 config/data, 3 divergence, 4 descriptor mismatch, 5 gradcheck.
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Arl(ArlError::NonFiniteLoss { .. }) => 3,
            Failure::Arl(ArlError::DescriptorMismatch { .. }) => 4,
            Failure::Arl(_) => 2,
            Failure::GradCheck(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Arl(e) => write!(f, "{}", e),
            Failure::GradCheck(s) => write!(f, "gradient check failed: {}", s),
        }
    }
}

impl From<ArlError> for Failure {
    fn from(e: ArlError) -> Self {
        Failure::Arl(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Arl(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Arl(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Arl(e.into())
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;

/// `--seed` if given, else `ARL_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> CmdResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("ARL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| ArlError::Config(format!("ARL_SEED=`{}` is not an integer", v)).into()),
        Err(_) => Ok(0),
    }
}
