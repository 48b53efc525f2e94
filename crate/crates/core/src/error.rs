use thiserror::Error;

/// Errors raised across the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected config field `{field}`: {reason}")]
    RejectedConfig { field: String, reason: String },

    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("Riccati solution left its a-priori bound at t={t}: |P|={value} > {bound}")]
    NumericalBlowup { t: f64, value: f64, bound: f64 },

    #[error("{what}={value} outside [{lo}, {hi}]")]
    OutOfDomain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("no sign change on bracket [{lo}, {hi}] for delta={delta}")]
    NoBracket { delta: f64, lo: f64, hi: f64 },

    #[error("{solver}: no convergence after {iterations} iterations (residual {residual:e})")]
    MaxIterExceeded {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("Picard loop stalled at t={t} after {iterations} iterations (last change {change:e})")]
    PicardDiverged {
        t: f64,
        iterations: usize,
        change: f64,
    },

    #[error("boundary residual {band:e} exceeds 10x interior residual {interior:e} inside the required window")]
    BoundaryContamination { band: f64, interior: f64 },

    #[error("a-priori bound violated: {what} = {value} > {bound}")]
    BoundViolated {
        what: &'static str,
        value: f64,
        bound: f64,
    },

    #[error("inputs built from different models ({left} vs {right})")]
    ModelMismatch { left: String, right: String },

    #[error("ansatz {which} collection {value:e} exceeds tolerance {tol:e}")]
    AnsatzMismatch {
        which: &'static str,
        value: f64,
        tol: f64,
    },

    #[error("step self-convergence gap {gap:e} exceeds {tol:e}")]
    StepTooCoarse { gap: f64, tol: f64 },

    #[error("{fraction} of simulated nu-paths left [-{half_width}, {half_width}]")]
    PathExit { fraction: f64, half_width: f64 },

    #[error("path bundles were not generated from the same noise streams: {0}")]
    StreamMismatch(String),

    #[error("assumption check failed: {0}")]
    Assumption(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
