use std::fmt;

/// Error type shared by every layer of the engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: ShapeDisplay,
        rhs: ShapeDisplay,
    },

    #[error("{op}: index {index} out of range for axis of length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: f64,
        len: usize,
    },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("invalid {family} distribution: {detail}")]
    InvalidDistribution { family: &'static str, detail: String },

    #[error("missing path `{path}`; nearest available: [{}]", nearest.join(", "))]
    MissingPath { path: String, nearest: Vec<String> },

    #[error("duplicate path {0}")]
    DuplicatePath(String),

    #[error("intra-slice dependency cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("variable `{variable}` depends on unknown variable `{missing}`")]
    DanglingDependency { variable: String, missing: String },

    #[error("variable `{variable}`: {detail}")]
    Binding { variable: String, detail: String },

    #[error("variable `{variable}`, path `{path}`, step {step}: {detail}")]
    SpecViolation {
        variable: String,
        path: String,
        step: usize,
        detail: String,
    },

    #[error("deterministic field `{variable}.{path}` at step {step} disagrees with the observed value")]
    DeterministicMismatch {
        variable: String,
        path: String,
        step: usize,
    },

    #[error("field `{variable}.{path}` is not observed")]
    MissingField { variable: String, path: String },

    #[error("field `{variable}.{path}` already observed")]
    AlreadyObserved { variable: String, path: String },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inference: {0}")]
    Inference(String),

    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: ShapeDisplay(lhs.to_vec()),
            rhs: ShapeDisplay(rhs.to_vec()),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// A shape rendered as `[a, b, c]` inside error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeDisplay(pub Vec<usize>);

impl fmt::Display for ShapeDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}
