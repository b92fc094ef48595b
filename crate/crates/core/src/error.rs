use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite Hamiltonian value at t={t}, q={q:?}, p={p:?}")]
    NumericalDomain { t: f64, q: Vec<f64>, p: Vec<f64> },

    #[error("{solver} did not converge after {iterations} iterations (last residual {residual:e})")]
    SolverDiverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("trajectory left the overflow guard at t={time}")]
    TrajectoryEscape { time: f64 },

    #[error("horizon {horizon} exceeds the twist window sigma_eff={sigma}")]
    SigmaExceeded { horizon: f64, sigma: f64 },

    #[error("sigma override {sigma} rejected: twist margin {margin:e} on the sampled box")]
    TwistNotVerified { sigma: f64, margin: f64 },

    #[error("time {t} is past the classical existence horizon {horizon}")]
    ExistenceHorizonExceeded { t: f64, horizon: f64 },

    #[error("characteristics fold at t={t}")]
    FoldDetected { t: f64 },

    #[error("query point {q:?} is not covered by the propagated front")]
    QueryOutsideFront { q: Vec<f64> },

    #[error("initial graph is inconsistent: integrated slope differs from values by {gap:e}")]
    InconsistentGraph { gap: f64 },

    /// `best` is the lowest value reached, the action of an admissible
    /// curve and hence an upper bound.
    #[error("multistart minimization disagreed by {spread:e} and no start met the critical-point test (best {best})")]
    MultistartExhausted { spread: f64, best: f64 },

    #[error("search radius of {radius} cells was hit twice")]
    SearchRadiusExceeded { radius: usize },

    #[error("{what} did not converge: {detail}")]
    NonConvergence { what: &'static str, detail: String },

    #[error("level {level} is below the critical value (running infimum keeps decreasing)")]
    LevelBelowCritical { level: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
