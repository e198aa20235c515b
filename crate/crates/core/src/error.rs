use thiserror::Error;

/// Unified error type for all fallible operations in the crate.
///
/// Variants are split so callers can distinguish malformed input files
/// (`Parse`) from structurally invalid data (`Invariant`), and both from
/// plain I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("mesh is non-orientable: {0}")]
    NonOrientable(String),

    #[error("singular system in joint regressor refit (condition estimate {cond:.3e})")]
    SingularSystem { cond: f64 },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("{0}")]
    Unsupported(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        Error::Invariant(message.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
