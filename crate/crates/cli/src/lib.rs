//! Command-line driver: every pipeline stage as a subcommand that reads the
//! artifacts of earlier stages from the runs directory.

pub mod commands;
pub mod config;
pub mod runs;
pub mod store;

use thiserror::Error;

use tape_core::eval::EvalError;
use tape_core::model::ModelError;
use tape_core::pipeline::PipelineError;
use tape_core::synthgen::SynthError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`{}: {message}", line.map(|l| format!(" (line {})", l)).unwrap_or_default())]
    ConfigParse {
        key: String,
        line: Option<usize>,
        message: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("`{stage}` needs the output of `{needed}`; expected {path}")]
    MissingPrerequisite {
        stage: String,
        needed: String,
        path: String,
    },
    #[error("malformed artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Pipeline(e.into())
    }
}
