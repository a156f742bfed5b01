use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite: pivot {pivot} has value {value:e}")]
    NotSpd { pivot: usize, value: f64 },

    #[error("matrix is singular")]
    Singular,

    #[error("Lyapunov operator is singular (eigenvalues of B sum to zero)")]
    SingularLyapunov,

    #[error("diffusion matrix a(t, x) is singular at node {node}")]
    SingularDiffusion { node: usize },

    #[error("non-finite state at node {node}")]
    NonFinite { node: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {node} is the terminal node, where K(T) = 0 is singular")]
    TerminalNode { node: usize },

    #[error("backward table: K at node {node} (t = {t}) is not SPD; auxiliary diffusion degenerate or grid too coarse near T")]
    TableNotSpd { node: usize, t: f64 },

    #[error("closed-form backward table unavailable: {0}; use the ODE route")]
    ClosedFormUnavailable(String),

    #[error("rejection oracle accepted {accepted} of {attempts} paths (rate {rate:e}) with eps = {eps}; use a larger endpoint tolerance")]
    LowAcceptance {
        accepted: usize,
        attempts: usize,
        rate: f64,
        eps: f64,
    },

    #[error("log-weights omit different normalising constants and cannot be compared")]
    ConstantMismatch,

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
