use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum IbnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires scalar root")]
    NonScalarRoot,

    #[error("bandwidth must be positive")]
    NonPositiveBandwidth,

    #[error("no observed variables to interpolate from")]
    AllVariablesMissing,

    #[error("diagnostics require masked variables")]
    NoMaskedVariables,

    #[error("{0}")]
    Invalid(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, IbnError>;

impl IbnError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        IbnError::Invalid(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        IbnError::Io {
            path: path.into(),
            source,
        }
    }
}
