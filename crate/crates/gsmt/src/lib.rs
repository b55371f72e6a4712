//! GSMT: multi-bus trajectory prediction from onboard GPS data.

pub mod checkpoint;
pub mod config;
pub mod corrector;
pub mod eval;
pub mod geo;
pub mod graphs;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth;

use thiserror::Error;

/// Top-level error for pipeline entry points and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] ingest::IngestError),
    #[error(transparent)]
    Graph(#[from] graphs::GraphError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Corrector(#[from] corrector::CorrectorError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error("compatibility error: {0}")]
    Compat(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format(_) => 3,
            Error::Model(model::ModelError::Training { .. }) => 4,
            Error::Compat(_) => 5,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
