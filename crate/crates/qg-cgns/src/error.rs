use thiserror::Error;

/// Errors produced by the solver, the filters, and the run harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("grid mismatch: expected {expected} nodes per side, got {actual}")]
    GridMismatch { expected: usize, actual: usize },

    #[error(
        "CFL violation at step {step}: U_max = {u_max:.6}, dt = {dt:.6e}, h = {h:.6e} \
         (U_max*dt/h = {ratio:.4} > 1)"
    )]
    CflViolation {
        step: usize,
        u_max: f64,
        dt: f64,
        h: f64,
        ratio: f64,
    },

    #[error("non-finite values in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("spin-up prefix too short: got {got} states, need at least {need}")]
    PrefixTooShort { got: usize, need: usize },

    #[error("insufficient history: {0}")]
    InsufficientHistory(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed snapshot file {path}: {reason}")]
    Snapshot { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numerical, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter { .. } | Error::Config(_) => 2,
            Error::Io { .. } | Error::Snapshot { .. } => 4,
            _ => 3,
        }
    }
}
