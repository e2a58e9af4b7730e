use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage an error surfaced from, used to tag errors raised inside the repair loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    PreEvaluate,
    Analyze,
    Recommend,
    Reflect,
    Refine,
    FineTune,
    PostEvaluate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Load => "load",
            Stage::PreEvaluate => "pre-evaluate",
            Stage::Analyze => "analyze",
            Stage::Recommend => "recommend",
            Stage::Reflect => "reflect",
            Stage::Refine => "refine",
            Stage::FineTune => "fine-tune",
            Stage::PostEvaluate => "post-evaluate",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scenario attributes: {0}")]
    InvalidAttributes(String),

    #[error("invalid route {route_id}: {reason}")]
    InvalidRoute { route_id: String, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("scenario id {0} already exists with different content")]
    DuplicateId(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error at line {line}, field `{field}`: {message}")]
    SchemaError {
        line: usize,
        field: String,
        message: String,
    },

    #[error("text has no tokens after tokenization")]
    EmptyText,

    #[error("LLM unavailable: {0}")]
    LlmUnavailable(String),

    #[error("malformed LLM output: {0}")]
    MalformedLlmOutput(String),

    #[error("no replay fixture for request {0}")]
    FixtureMissing(String),

    #[error("route set is empty")]
    EmptyRouteSet,

    #[error("failure pattern set is empty")]
    EmptyPatternSet,

    #[error("scenario bank is empty")]
    EmptyBank,

    #[error("conflicting suggestions: {0}")]
    ConflictingSuggestions(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips stage tags and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Attaches a pipeline stage to errors.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|source| match source {
            tagged @ Error::Stage { .. } => tagged,
            source => Error::Stage {
                stage,
                source: Box::new(source),
            },
        })
    }
}
