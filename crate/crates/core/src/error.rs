use thiserror::Error;

pub type Result<T, E = NapError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NapError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index out of range in {op}: {index} >= {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate parameter: {0}")]
    Degenerate(String),

    #[error("non-finite value in {what}{}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    NumericFault { what: String, layer: Option<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl NapError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NapError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        NapError::Contract(msg.into())
    }
}

impl From<std::io::Error> for NapError {
    fn from(e: std::io::Error) -> Self {
        NapError::Io(e.to_string())
    }
}
