use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "loop closure did not converge after {iterations} iterations (residual {residual:.3e})"
    )]
    Assembly { iterations: usize, residual: f64 },
    #[error("singular generalized inertia: {0}")]
    SingularInertia(String),
    #[error("non-finite state at step {step} (t = {time:.6} s): {what}")]
    NonFinite {
        step: usize,
        time: f64,
        what: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
