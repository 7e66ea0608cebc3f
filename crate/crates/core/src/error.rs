use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op} (node {node}): {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        node: usize,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("output node {node} is not a scalar (shape {shape:?})")]
    NotScalar { node: usize, shape: Vec<usize> },

    #[error("leaf node {0} has no binding")]
    UnboundLeaf(usize),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token sequence: {0}")]
    Token(String),

    #[error("empty surface: no sign change found in the probe box")]
    EmptySurface,

    #[error("training diverged at epoch {epoch}, sample {sample}: loss = {loss}")]
    Diverged { epoch: usize, sample: usize, loss: f64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
