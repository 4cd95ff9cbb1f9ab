use std::fmt;

use thiserror::Error;

/// Shapes are carried verbatim so dimension errors can name both operands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs} and {rhs}")]
    Dimension {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault in block {block}: {detail}")]
    NumericFault { block: usize, detail: String },

    #[error("numeric fault at optimizer step {step}: non-finite gradient in {param}")]
    NonFiniteGradient { step: u64, param: String },

    #[error("degenerate category {0}: no member attributes")]
    DegenerateCategory(usize),

    #[error("degenerate attribute {0}: occurs in no category")]
    DegenerateAttribute(usize),

    #[error("empty graph: no attribute pair co-occurs")]
    EmptyGraph,

    #[error("empty class {0}: no samples")]
    DegenerateClass(usize),

    #[error("split error: {0}")]
    Split(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at row {row}: {detail}")]
    Parse { row: usize, detail: String },

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("artifact mismatch: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Both numeric-fault variants.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericFault { .. } | Error::NonFiniteGradient { .. })
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: Shape(lhs.to_vec()),
            rhs: Shape(rhs.to_vec()),
        }
    }
}
