use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("state space of {size} entries exceeds the configured cap of {cap}")]
    ResourceLimit { size: u128, cap: usize },

    #[error("relative value iteration did not converge in {iterations} iterations (last span {span:.3e})")]
    NotConverged { iterations: usize, span: f64 },

    #[error("two-user reduced solve failed for {params}: {source}")]
    ReducedSolve {
        params: String,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "queues are not stabilizing: {backlog} files in system at t = {time_s:.0} s \
         (offered load {offered_load:.3} of full-occupancy capacity)"
    )]
    Unstable {
        offered_load: f64,
        backlog: usize,
        time_s: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
