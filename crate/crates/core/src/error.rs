//! Error type shared across the library.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, the tape, Gaussian utilities, layers,
/// training and I/O.
#[derive(Debug)]
pub enum Error {
    /// Incompatible shapes for an operation. `node` is set when the error
    /// was raised while recording on a tape.
    Shape {
        op: &'static str,
        node: Option<usize>,
        detail: String,
    },
    /// An operation produced a non-finite value.
    NonFinite { op: &'static str, node: usize },
    /// `backward` was called on a non-scalar root.
    NonScalarRoot { shape: Vec<usize> },
    /// Two leaves were bound under the same name on one tape.
    DuplicateLeaf { name: String },
    /// Cholesky factorisation failed even at the largest jitter in the
    /// policy ladder. Carries every jitter value that was attempted.
    NotPositiveDefinite {
        size: usize,
        attempted_jitters: Vec<f64>,
    },
    /// A raw (single-attempt) Cholesky hit a non-positive pivot.
    CholeskyFailed { pivot: usize },
    /// A precondition on an argument was violated (negative variance,
    /// index out of range, ...).
    InvalidArgument(String),
    /// An error raised inside a named layer.
    InLayer { layer: String, source: Box<Error> },
    /// Dataset ingestion problem (missing file, malformed cell, ...).
    Data(String),
    /// Model/training configuration problem.
    Config(String),
    /// Checkpoint serialisation or deserialisation problem.
    Checkpoint(String),
    /// Underlying I/O failure with the path or action that failed.
    Io {
        context: String,
        source: std::io::Error,
    },
    /// Training aborted on a non-finite ELBO. Points at the last
    /// checkpoint written before the abort, if any.
    NonFiniteAbort { last_checkpoint: Option<PathBuf> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, node, detail } => match node {
                Some(id) => write!(f, "shape error in `{op}` at node {id}: {detail}"),
                None => write!(f, "shape error in `{op}`: {detail}"),
            },
            Error::NonFinite { op, node } => {
                write!(f, "non-finite value produced by `{op}` at node {node}")
            }
            Error::NonScalarRoot { shape } => {
                write!(f, "backward requires a scalar root, got shape {shape:?}")
            }
            Error::DuplicateLeaf { name } => {
                write!(f, "leaf `{name}` bound twice on the same tape")
            }
            Error::NotPositiveDefinite {
                size,
                attempted_jitters,
            } => write!(
                f,
                "{size}x{size} matrix not positive definite; attempted jitters {attempted_jitters:?}"
            ),
            Error::CholeskyFailed { pivot } => {
                write!(f, "cholesky failed: non-positive pivot at row {pivot}")
            }
            Error::InvalidArgument(what) => write!(f, "invalid argument: {what}"),
            Error::InLayer { layer, source } => write!(f, "in layer `{layer}`: {source}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io { context, source } => write!(f, "io error ({context}): {source}"),
            Error::NonFiniteAbort { last_checkpoint } => match last_checkpoint {
                Some(p) => write!(
                    f,
                    "training aborted on non-finite ELBO; last good checkpoint: {}",
                    p.display()
                ),
                None => write!(
                    f,
                    "training aborted on non-finite ELBO; no checkpoint written yet"
                ),
            },
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::InLayer { source, .. } => Some(source.as_ref()),
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    /// Wraps an error with the name of the layer it occurred in.
    pub fn in_layer(layer: &str) -> impl FnOnce(Error) -> Error + '_ {
        move |e| Error::InLayer {
            layer: layer.to_string(),
            source: Box::new(e),
        }
    }
}
