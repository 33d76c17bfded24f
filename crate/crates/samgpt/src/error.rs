//! Crate-wide error type.
//!
//! Shape mismatches in tensor code are bugs and panic at the call site; this
//! enum covers everything data- or environment-dependent: bad files, bad
//! configs, degenerate numerical inputs, and protocol violations.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A text artifact (tsv/csv/json) failed to parse; line is 1-based,
    /// 0 when the failure is not tied to a single line.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// A binary or structured artifact is malformed (tensor file, manifest).
    #[error("{0}")]
    Format(String),

    /// Inconsistent run configuration (flags, plan files, variant names).
    #[error("{0}")]
    Config(String),

    #[error("empty graph")]
    EmptyGraph,

    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("logarithm of a non-positive value")]
    NonPositiveLog,

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite loss ({value}) at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    /// The downstream target must be unseen during pre-training.
    #[error("cross-domain violation: target domain '{0}' is in the pre-training source roster")]
    CrossDomain(String),

    /// Episode generation needs m support instances plus at least one query
    /// per class.
    #[error("class {class} has only {have} labeled instances, need at least {need}")]
    ClassTooSmall {
        class: usize,
        have: usize,
        need: usize,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: cross-domain violations get their own
    /// code so harnesses can tell a protocol error from an ordinary failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CrossDomain(_) => 2,
            _ => 1,
        }
    }

    /// Short machine-parsable category printed on stderr by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::EmptyGraph => "empty-graph",
            Error::ZeroNorm => "zero-norm",
            Error::NonPositiveLog => "non-positive-log",
            Error::NonScalarLoss { .. } => "non-scalar-loss",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::CrossDomain(_) => "cross-domain",
            Error::ClassTooSmall { .. } => "class-too-small",
        }
    }
}
