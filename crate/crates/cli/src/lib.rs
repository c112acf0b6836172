//! Configuration-driven commands behind the `icenet` binary.

pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

pub use commands::{run, Command};
pub use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<icenet_core::Error> for CliError {
    fn from(e: icenet_core::Error) -> Self {
        use icenet_core::Error as E;
        let msg = e.to_string().replace('\n', " ");
        match e {
            E::Divergence { .. } => CliError::Divergence(msg),
            E::Invalid(_) => CliError::Config(msg),
            E::SequenceTooShort { .. } | E::StaleCache(_) => CliError::Other(msg),
            E::Dimension { .. }
            | E::MissingColumn(_)
            | E::Row { .. }
            | E::Schema(_)
            | E::UnknownLevel { .. }
            | E::Io { .. }
            | E::Csv(_)
            | E::Json(_) => CliError::Data(msg),
        }
    }
}
