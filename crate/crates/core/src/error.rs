use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid table: {0}")]
    InvalidTable(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("unknown document id {0}")]
    UnknownDocument(u64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("example {example_id} has {available} candidates, at least {required} negatives are needed")]
    InsufficientNegatives {
        example_id: u64,
        available: usize,
        required: usize,
    },

    #[error("input of length {len} exceeds the maximum of {max}")]
    InputTooLong { len: usize, max: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("every pair is tied; the sign test is undefined")]
    AllTies,

    #[error("unsupported {kind} file version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 for usage/config errors, 2 for data errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::InvalidTable(_)
            | Error::Parse { .. }
            | Error::DuplicateId(_)
            | Error::UnknownDocument(_)
            | Error::InsufficientNegatives { .. }
            | Error::InputTooLong { .. }
            | Error::InvalidInput(_)
            | Error::AllTies
            | Error::Version { .. }
            | Error::Io { .. } => 2,
            Error::Json(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
