use thiserror::Error;

/// Errors raised by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A characteristic left the strip by more than one step's reach, produced a
    /// non-finite state, or did not reach a boundary within the step budget.
    #[error("characteristic step failure at s={s}: {reason}")]
    StepFailure { s: f64, reason: String },

    /// Backward tracing from a grid node could not reach the inflow boundary.
    #[error("no inflow entry reachable from (t={t}, x3={x3}, m={m}): {source}")]
    UnreachableEntry {
        t: f64,
        x3: f64,
        m: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "fixed-point iteration did not converge after {iterations} iterations (last difference {last_difference:e})"
    )]
    NoConvergence { iterations: usize, last_difference: f64 },

    #[error("query point outside the grid cover: {0}")]
    OutOfCover(String),

    #[error("non-finite value while computing {0}")]
    NonFiniteNorm(String),

    #[error("resource guard: {0}")]
    ResourceGuard(String),

    #[error("malformed configuration: {0}")]
    Parse(String),

    #[error("configuration schema violations:\n  {}", .0.join("\n  "))]
    Schema(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
