//! Posterior-mean drift estimates: the mixture filter over a finite (or
//! quadrature) support, Kalman–Bucy for linear Gaussian drift, Wonham for a
//! hidden chain, and the power-utility equivalence filter under the tilted
//! prior.

mod kalman;
mod mixture;
mod tilted;
mod wonham;

pub use kalman::{
    kalman_step, riccati_integrate, riccati_rhs, CovarianceTable, GaussianState, KalmanFilter,
    RICCATI_BOUND,
};
pub use mixture::{mixture_posterior_mean, MixtureFilter};
pub use tilted::{
    build_tilted_prior, power_equivalence_filter, PowerFilter, TiltedPrior, TiltedSupport,
};
pub use wonham::{wonham_step, ChainForwardFilter, SimplexState, WonhamFilter};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{LocalVol, MarketSpec, PriorSpec};
use crate::quadrature::DEFAULT_NODES;
use crate::scalar::Real;

/// Posterior summary at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState<T: Real> {
    pub t: T,
    pub estimate: DVector<T>,
    pub posterior: Posterior<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Posterior<T: Real> {
    Mixture { weights: Vec<T> },
    Gaussian { mean: DVector<T>, cov: DMatrix<T> },
    Simplex { probs: Vec<T> },
}

impl<T: Real> Posterior<T> {
    /// Flat auxiliary values for trace export.
    pub fn values(&self) -> Vec<T> {
        match self {
            Posterior::Mixture { weights } => weights.clone(),
            Posterior::Gaussian { mean, cov } => mean.iter().chain(cov.iter()).copied().collect(),
            Posterior::Simplex { probs } => probs.clone(),
        }
    }
}

/// A drift filter stepped along one observed path.
///
/// `current` is always `R̃(t)` at the filter's current time, and `advance`
/// consumes the increment over `[t, t + dt]` with left-point coefficients.
pub trait DriftFilter<T: Real>: Send {
    fn variant(&self) -> &'static str;

    fn t(&self) -> T;

    /// `â(t)` given the observations up to the current time.
    fn estimate_into(&mut self, current: &[T], out: &mut [T]);

    fn advance(&mut self, current: &[T], local: &LocalVol<T>, d_r: &[T], dt: T) -> Result<()>;

    fn state(&mut self, current: &[T]) -> FilterState<T>;

    /// `log Z̄(t)` when the filter carries the mixture density itself.
    fn log_density(&self) -> Option<T> {
        None
    }

    fn estimate(&mut self, current: &[T]) -> DVector<T> {
        let mut out = DVector::zeros(current.len());
        self.estimate_into(current, out.as_mut_slice());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// Bayes mixture over the prior support (Gauss–Hermite nodes for Gaussian priors).
    Mixture,
    Kalman,
    Wonham,
    /// Discrete-time forward recursion for a chain prior.
    Forward,
}

impl FilterKind {
    /// The natural filter for a prior.
    pub fn default_for<T: Real>(prior: &PriorSpec<T>) -> Self {
        match prior {
            PriorSpec::Discrete(_) => FilterKind::Mixture,
            PriorSpec::GaussianStatic(_) | PriorSpec::OrnsteinUhlenbeck(_) => FilterKind::Kalman,
            PriorSpec::MarkovChain(_) => FilterKind::Wonham,
        }
    }
}

/// Builds a fresh filter of the requested kind for the spec's prior.
pub fn build_filter<T: Real>(
    spec: &MarketSpec<T>,
    kind: FilterKind,
) -> Result<Box<dyn DriftFilter<T>>> {
    let incompatible =
        || Error::Incompatible(format!("{kind:?} filter does not apply to this prior"));
    Ok(match (kind, &spec.prior) {
        (FilterKind::Mixture, PriorSpec::Discrete(_) | PriorSpec::GaussianStatic(_)) => Box::new(
            MixtureFilter::from_prior(&spec.prior, spec.drift_map.clone(), DEFAULT_NODES)?,
        ),
        (FilterKind::Kalman, PriorSpec::GaussianStatic(g)) => {
            require_identity(spec)?;
            Box::new(KalmanFilter::new(
                crate::market::OuCoefficients::static_prior(g.mean.clone(), g.cov.clone()),
            ))
        }
        (FilterKind::Kalman, PriorSpec::OrnsteinUhlenbeck(c)) => {
            require_identity(spec)?;
            Box::new(KalmanFilter::new(c.clone()))
        }
        (FilterKind::Wonham, PriorSpec::MarkovChain(c)) => Box::new(WonhamFilter::new(
            c.clone(),
            spec.drift_map.clone(),
            spec.n_stocks,
        )?),
        (FilterKind::Forward, PriorSpec::MarkovChain(c)) => {
            Box::new(ChainForwardFilter::new(c.clone(), spec.drift_map.clone()))
        }
        _ => return Err(incompatible()),
    })
}

fn require_identity<T: Real>(spec: &MarketSpec<T>) -> Result<()> {
    if spec.drift_map.is_identity() {
        Ok(())
    } else {
        Err(Error::Incompatible(
            "Kalman filter requires the identity drift map".into(),
        ))
    }
}
