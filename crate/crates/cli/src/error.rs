use std::path::Path;

use flowgan_core::codec::CodecError;
use flowgan_core::dynmap::MapError;
use flowgan_core::gravity::GravityError;
use flowgan_core::metrics::MetricError;
use flowgan_core::mobility::MobilityError;
use flowgan_core::model::ModelError;
use thiserror::Error;

/// Process exit codes, one per error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const DATA: i32 = 4;
    pub const UNKNOWN_CONDITION: i32 = 5;
    pub const DIVERGED: i32 = 6;
    pub const CHECKPOINT: i32 = 7;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Data(_) => exit::DATA,
            CliError::Model(e) => match e {
                ModelError::UnknownCondition(_) => exit::UNKNOWN_CONDITION,
                ModelError::DivergenceDetected { .. } => exit::DIVERGED,
                ModelError::VersionMismatch { .. } | ModelError::CorruptFile(_) | ModelError::ModeMismatch { .. } => {
                    exit::CHECKPOINT
                }
                ModelError::InvalidConfig(_) => exit::CONFIG,
                ModelError::Io(_) => exit::IO,
                ModelError::EmptyDataset | ModelError::InvalidDataset(_) => exit::DATA,
                ModelError::Tensor(_) | ModelError::ShapeContract { .. } => exit::INTERNAL,
            },
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(MapError, MobilityError, CodecError, GravityError, MetricError, csv::Error, serde_json::Error);
