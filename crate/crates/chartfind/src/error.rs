use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate note id {0:?}")]
    DuplicateNote(String),

    #[error("duplicate concept id {0:?}")]
    DuplicateConcept(String),

    #[error("unknown concept id {0:?}")]
    UnknownConcept(String),

    #[error("unknown relation kind {0:?}")]
    UnknownRelationKind(String),

    #[error("empty admissible vocabulary: nothing to match")]
    EmptyVocabulary,

    #[error("cannot encode zero tokens")]
    DegenerateInput,

    #[error("degenerate embedding: token rows sum to the zero vector")]
    DegenerateEmbedding,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("generator client: {0}")]
    Client(String),

    #[error("generator failed on chunk {chunk_id}: {message}")]
    Generator { chunk_id: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("pipeline stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
