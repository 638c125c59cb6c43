use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel {name} is not symmetric at (s={s}, t={t}): asymmetry {asymmetry:e}")]
    NonSymmetricKernel { name: String, s: f64, t: f64, asymmetry: f64 },

    #[error("horizon [{t0}, {t_end}] is not an integer number of steps of {dt}")]
    GridMismatch { t0: f64, t_end: f64, dt: f64 },

    #[error("grid needs at least 2 steps, got {steps}")]
    GridTooCoarse { steps: usize },

    #[error("kernel evaluated outside its domain: s={s} < t={t}")]
    Domain { s: f64, t: f64 },

    #[error("tabulated {name} has no value at time {time}")]
    OffGrid { name: String, time: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("field {field} has no block at (k={k}, j={j})")]
    Incomplete { field: String, k: usize, j: usize },

    #[error("column index {j} outside grid with {nodes} nodes")]
    IndexOut { j: usize, nodes: usize },

    #[error("{stage} did not solve: {status}")]
    NotSolved { stage: String, status: String },

    #[error("S(s,s) is singular at s={s}")]
    SingularS { s: f64 },

    #[error("leader gain matrix is singular at t={t}")]
    SingularRhat { t: f64 },

    #[error("non-finite state on path {path} at step {step}")]
    NonFinitePath { path: usize, step: usize },

    #[error("mean-field cost terms need at least 2 paths, got {paths}")]
    InsufficientPaths { paths: usize },

    #[error("shooting system is singular (min pivot {pivot:e})")]
    ShootingFailure { pivot: f64 },

    #[error("unknown preset {0:?} (expected case1 or case2)")]
    UnknownPreset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("problem file: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
