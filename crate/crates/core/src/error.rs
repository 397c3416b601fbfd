use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("simulation produced a non-finite state at step {step}")]
    Diverged { step: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("sequence too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error(
        "ambiguous rank decision: normalized singular value {value:e} lies within the band around \
         tolerance {tol:e}; choose a different rank tolerance"
    )]
    AmbiguousRank { value: f64, tol: f64 },

    #[error("{block} is rank deficient: rank {rank} < {expected}")]
    RankDeficient {
        block: String,
        rank: usize,
        expected: usize,
    },

    #[error("state information unavailable: {0}")]
    MissingStates(String),

    #[error(
        "{rejected} of {attempts} trajectories left the operating region; reduce the excitation \
         amplitude or enlarge the region"
    )]
    ExcessiveRejection { rejected: usize, attempts: usize },

    #[error("no fixed point below r_max = {r_max:e} (slope condition violated)")]
    NoFixedPoint { r_max: f64 },

    #[error("quadratic program is primal infeasible; dominant constraint block: {0}")]
    Infeasible(String),

    #[error("terminal constraint unreachable: {0}")]
    TerminalUnreachable(String),

    #[error("sampler produced a point outside the operating region: {0}")]
    SamplerOutOfRegion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
