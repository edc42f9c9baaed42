use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("time step {dt} does not divide horizon {horizon}")]
    NonDivisibleStep { dt: f64, horizon: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error(
        "volatility is not uniformly elliptic at path {path}, step {step} (t = {time}): \
         smallest eigenvalue of sigma*sigma^T is {min_eigenvalue}, required >= {bound}"
    )]
    Ellipticity {
        path: usize,
        step: usize,
        time: f64,
        min_eigenvalue: f64,
        bound: f64,
    },

    #[error("coefficient bound exceeded at step {step} (t = {time}): {what} = {value} > {bound}")]
    CoefficientBound {
        step: usize,
        time: f64,
        what: &'static str,
        value: f64,
        bound: f64,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("Riccati integration failed at t = {time}: {reason}")]
    Riccati { time: f64, reason: String },

    #[error("G infinite: prior variance too large for this Q·T (smallest precision eigenvalue {min_eigenvalue})")]
    InfiniteNormalizer { min_eigenvalue: f64 },

    #[error("tilted prior is required for the power-utility strategy")]
    MissingTiltedPrior,

    #[error("could not bracket the Lagrange multiplier: {0}")]
    Bracket(String),

    #[error("claim value {value} lies outside the utility domain")]
    ClaimOutsideDomain { value: f64 },

    #[error("point {point:?} at t = {time} lies outside the finite-difference domain")]
    OutOfDomain { point: Vec<f64>, time: f64 },

    #[error("explicit cross-derivative step is unstable (ratio {ratio:.3} > 1); use dt <= {suggested_dt:e}")]
    Stability { ratio: f64, suggested_dt: f64 },

    #[error("incompatible scenario: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt path cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
