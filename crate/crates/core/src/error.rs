use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("points lie on spheres of different radius ({0} vs {1})")]
    RadiusMismatch(f64, f64),

    #[error("truncation degree cap {cap} exceeded (t/R^2 = {tau:e}, tol = {tol:e})")]
    DegreeCapExceeded { cap: usize, tau: f64, tol: f64 },

    #[error("covariance not positive semidefinite: eigenvalue {eigenvalue:e} below -1e-8 * lambda_max ({lambda_max:e})")]
    NotPositiveSemidefinite { eigenvalue: f64, lambda_max: f64 },

    #[error("kernel parameters drive h outside [h_lo, h_up] = [{lo}, {hi}]: {detail}")]
    KernelOutOfBounds { lo: f64, hi: f64, detail: String },

    #[error("non-finite field value at step {step}, node {node}")]
    NonFinite { step: usize, node: usize },

    #[error("Picard iteration did not contract: last ratio {ratio} after {iterations} iterations")]
    PicardDiverged { ratio: f64, iterations: usize },

    #[error("configuration invalid:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
