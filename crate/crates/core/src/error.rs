use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite state encountered at t = {time}")]
    NumericOverflow { time: f64 },

    #[error("trajectory diverged at t = {time} (|x| = {norm:.3e} exceeds {bound:.3e})")]
    Divergence { time: f64, norm: f64, bound: f64 },

    #[error("solver failed: {reason} (last residuals: {residuals:?})")]
    SolverFailure {
        reason: String,
        residuals: Vec<f64>,
    },

    #[error("iteration did not converge: {reason} (residual trace: {trace:?})")]
    NonConvergence { reason: String, trace: Vec<f64> },

    #[error("collocation system is underdetermined: {rows} samples for {cols} unknowns")]
    Underdetermined { rows: usize, cols: usize },

    #[error("collocation matrix has effective rank {rank} < {expected}; null directions load on terms {null_terms:?}")]
    RankDeficient {
        rank: usize,
        expected: usize,
        null_terms: Vec<Vec<u32>>,
    },

    #[error("rollout from initial condition {index} {x0:?} failed: {source}")]
    Rollout {
        index: usize,
        x0: Vec<f64>,
        #[source]
        source: Box<Error>,
    },
}

pub(crate) fn check_dim(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::InvalidArgument(format!(
            "{what}: dimension {got}, expected {expected}"
        )));
    }
    Ok(())
}
