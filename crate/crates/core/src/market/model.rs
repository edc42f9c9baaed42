use std::borrow::Cow;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{frobenius, min_eigenvalue, spd_inverse};
use crate::market::prior::PriorSpec;
use crate::scalar::{from_usize, lit, to_f64, Real};
use crate::timefn::MatFn;

/// Uniform time grid `t_k = k T / K`, `k = 0..=K`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid<T: Real> {
    horizon: T,
    steps: usize,
}

impl<T: Real> TimeGrid<T> {
    /// Rejects a step that does not divide the horizon.
    pub fn new(horizon: T, dt: T) -> Result<Self> {
        if !(horizon > T::zero()) || !(dt > T::zero()) {
            return Err(Error::InvalidSpec("horizon and dt must be positive".into()));
        }
        let ratio = to_f64(horizon) / to_f64(dt);
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::NonDivisibleStep {
                dt: to_f64(dt),
                horizon: to_f64(horizon),
            });
        }
        Ok(Self {
            horizon,
            steps: steps as usize,
        })
    }

    pub fn with_steps(horizon: T, steps: usize) -> Result<Self> {
        if !(horizon > T::zero()) || steps == 0 {
            return Err(Error::InvalidSpec(
                "grid needs a positive horizon and at least one step".into(),
            ));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> T {
        self.horizon / from_usize(self.steps)
    }

    #[inline]
    pub fn time(&self, k: usize) -> T {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * from_usize(k) / from_usize(self.steps)
        }
    }

    pub fn times(&self) -> Vec<T> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Grid with `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor,
        }
    }

    /// Index of the grid point closest to `t`.
    pub fn index_of(&self, t: T) -> usize {
        let x = to_f64(t / self.horizon) * self.steps as f64;
        (x.round().max(0.0) as usize).min(self.steps)
    }
}

/// Observed excess-return history `R(t_0), ..., R(t_k)` stored flat.
#[derive(Clone, Copy, Debug)]
pub struct PathPrefix<'a, T> {
    n: usize,
    values: &'a [T],
}

impl<'a, T: Copy> PathPrefix<'a, T> {
    pub fn new(n: usize, values: &'a [T]) -> Self {
        debug_assert!(n > 0 && values.len().is_multiple_of(n) && !values.is_empty());
        Self { n, values }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, k: usize) -> &'a [T] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn current(&self) -> &'a [T] {
        self.at(self.len() - 1)
    }
}

/// Volatility functional `σ(t, R|[0,t])`, an n×n matrix.
pub trait VolModel<T: Real>: Send + Sync + Debug {
    fn sigma(&self, t: T, path: PathPrefix<'_, T>) -> DMatrix<T>;

    /// True when σ depends on time only, so it can be tabulated on a grid.
    fn is_path_independent(&self) -> bool {
        false
    }

    /// True when σ is one constant matrix.
    fn is_constant(&self) -> bool {
        false
    }
}

/// Interest rate functional `ρ(t, R|[0,t])`.
pub trait RateModel<T: Real>: Send + Sync + Debug {
    fn rate(&self, t: T, path: PathPrefix<'_, T>) -> T;

    fn is_path_independent(&self) -> bool {
        false
    }
}

/// `σ(t) = level + slope t`.
#[derive(Clone, Debug)]
pub struct AffineVol<T: Real>(pub MatFn<T>);

impl<T: Real> AffineVol<T> {
    pub fn constant(sigma: DMatrix<T>) -> Self {
        Self(MatFn::constant(sigma))
    }

    pub fn scalar(sigma: T) -> Self {
        Self::constant(DMatrix::from_element(1, 1, sigma))
    }
}

impl<T: Real> VolModel<T> for AffineVol<T> {
    fn sigma(&self, t: T, _path: PathPrefix<'_, T>) -> DMatrix<T> {
        self.0.eval(t)
    }

    fn is_path_independent(&self) -> bool {
        true
    }

    fn is_constant(&self) -> bool {
        self.0.is_constant()
    }
}

/// `σ(t, R) = diag(1 + s tanh(R_i(t))) base(t)`; bounded and elliptic for |s| < 1.
#[derive(Clone, Debug)]
pub struct ReturnLinkedVol<T: Real> {
    pub base: MatFn<T>,
    pub sensitivity: T,
}

impl<T: Real> VolModel<T> for ReturnLinkedVol<T> {
    fn sigma(&self, t: T, path: PathPrefix<'_, T>) -> DMatrix<T> {
        let mut s = self.base.eval(t);
        for (i, r) in path.current().iter().enumerate() {
            let scale = T::one() + self.sensitivity * r.tanh();
            s.row_mut(i).scale_mut(scale);
        }
        s
    }
}

/// `r(t) = level + slope t`.
#[derive(Clone, Debug)]
pub struct AffineRate<T: Real> {
    pub level: T,
    pub slope: T,
}

impl<T: Real> AffineRate<T> {
    pub fn constant(level: T) -> Self {
        Self {
            level,
            slope: T::zero(),
        }
    }
}

impl<T: Real> RateModel<T> for AffineRate<T> {
    fn rate(&self, t: T, _path: PathPrefix<'_, T>) -> T {
        self.level + self.slope * t
    }

    fn is_path_independent(&self) -> bool {
        true
    }
}

/// `r(t, R) = base + s tanh(mean_i R_i(t))`.
#[derive(Clone, Debug)]
pub struct ReturnLinkedRate<T: Real> {
    pub base: T,
    pub sensitivity: T,
}

impl<T: Real> RateModel<T> for ReturnLinkedRate<T> {
    fn rate(&self, _t: T, path: PathPrefix<'_, T>) -> T {
        let cur = path.current();
        let mean = cur.iter().fold(T::zero(), |a, b| a + *b) / from_usize(cur.len());
        self.base + self.sensitivity * mean.tanh()
    }
}

/// Drift map `A(t, θ, R|[0,t])` applied to the parameter value `θ(t)`.
#[derive(Clone, Debug, PartialEq)]
pub enum DriftMap<T: Real> {
    /// `A = θ(t)`.
    Identity,
    /// `A = θ(t) - k tanh(R(t))`, componentwise.
    ReturnReverting { speed: T },
}

impl<T: Real> DriftMap<T> {
    pub fn is_identity(&self) -> bool {
        matches!(self, DriftMap::Identity)
    }

    #[inline]
    pub fn apply_in_place(&self, current_excess: &[T], value: &mut [T]) {
        if let DriftMap::ReturnReverting { speed } = self {
            for (v, r) in value.iter_mut().zip(current_excess) {
                *v -= *speed * r.tanh();
            }
        }
    }

    /// Upper bound on `|A - θ|`, used for the boundedness checks.
    pub fn perturbation_bound(&self) -> T {
        match self {
            DriftMap::Identity => T::zero(),
            DriftMap::ReturnReverting { speed } => speed.abs(),
        }
    }
}

/// Volatility and its derived quantities at one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalVol<T: Real> {
    pub sigma: DMatrix<T>,
    /// `σ σ^T`
    pub cov: DMatrix<T>,
    /// `Q = (σ σ^T)^{-1}`
    pub q: DMatrix<T>,
}

impl<T: Real> LocalVol<T> {
    /// Evaluates a volatility matrix outside a simulation, with the same checks.
    pub fn checked(sigma: DMatrix<T>, ellipticity: T, bound: T, time: T) -> Result<Self> {
        Self::evaluate(sigma, ellipticity, bound, 0, 0, time)
    }

    /// Checks uniform ellipticity and the coefficient bound, returning the
    /// offending eigenvalue on failure.
    fn evaluate(
        sigma: DMatrix<T>,
        ellipticity: T,
        bound: T,
        path: usize,
        step: usize,
        time: T,
    ) -> Result<Self> {
        let norm = frobenius(&sigma);
        if !norm.is_finite() || norm > bound {
            return Err(Error::CoefficientBound {
                step,
                time: to_f64(time),
                what: "|sigma|",
                value: to_f64(norm),
                bound: to_f64(bound),
            });
        }
        let cov = &sigma * sigma.transpose();
        let min_eig = min_eigenvalue(&cov);
        if min_eig < ellipticity {
            return Err(Error::Ellipticity {
                path,
                step,
                time: to_f64(time),
                min_eigenvalue: to_f64(min_eig),
                bound: to_f64(ellipticity),
            });
        }
        let q = spd_inverse(&cov, "sigma sigma^T")?;
        Ok(Self { sigma, cov, q })
    }
}

/// Volatility along a grid: tabulated once when σ is deterministic,
/// evaluated along each path otherwise.
#[derive(Clone, Debug)]
pub enum VolField<T: Real> {
    Tabulated(Arc<Vec<LocalVol<T>>>),
    PathDependent {
        model: Arc<dyn VolModel<T>>,
        ellipticity: T,
        bound: T,
    },
}

impl<T: Real> VolField<T> {
    pub fn at<'s>(
        &'s self,
        path_index: usize,
        step: usize,
        t: T,
        prefix: PathPrefix<'_, T>,
    ) -> Result<Cow<'s, LocalVol<T>>> {
        match self {
            VolField::Tabulated(table) => Ok(Cow::Borrowed(&table[step])),
            VolField::PathDependent {
                model,
                ellipticity,
                bound,
            } => LocalVol::evaluate(
                model.sigma(t, prefix),
                *ellipticity,
                *bound,
                path_index,
                step,
                t,
            )
            .map(Cow::Owned),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, VolField::Tabulated(_))
    }

    /// Tabulated `Q(t_k)` for `k = 0..=K`; `None` when σ is path dependent.
    pub fn q_path(&self) -> Option<Vec<DMatrix<T>>> {
        match self {
            VolField::Tabulated(table) => Some(table.iter().map(|lv| lv.q.clone()).collect()),
            VolField::PathDependent { .. } => None,
        }
    }
}

/// Market coefficients plus the prior on the hidden drift.
#[derive(Clone, Debug)]
pub struct MarketSpec<T: Real> {
    pub n_stocks: usize,
    pub horizon: T,
    pub rate: Arc<dyn RateModel<T>>,
    pub vol: Arc<dyn VolModel<T>>,
    pub prior: PriorSpec<T>,
    pub drift_map: DriftMap<T>,
    pub initial_prices: Vec<T>,
    pub initial_wealth: T,
    /// Lower bound `c` in `σσ^T >= c I`.
    pub ellipticity: T,
    /// Bound on `|σ|` and `|r|`.
    pub coefficient_bound: T,
}

impl<T: Real> MarketSpec<T> {
    /// Zero rate, unit prices and wealth, identity drift map.
    pub fn new(
        n_stocks: usize,
        horizon: T,
        vol: Arc<dyn VolModel<T>>,
        prior: PriorSpec<T>,
    ) -> Self {
        Self {
            n_stocks,
            horizon,
            rate: Arc::new(AffineRate::constant(T::zero())),
            vol,
            prior,
            drift_map: DriftMap::Identity,
            initial_prices: vec![T::one(); n_stocks],
            initial_wealth: T::one(),
            ellipticity: lit(1e-8),
            coefficient_bound: lit(1e6),
        }
    }

    /// One stock with constant volatility.
    pub fn single_stock(sigma: T, horizon: T, prior: PriorSpec<T>) -> Self {
        Self::new(1, horizon, Arc::new(AffineVol::scalar(sigma)), prior)
    }

    pub fn with_rate(mut self, rate: Arc<dyn RateModel<T>>) -> Self {
        self.rate = rate;
        self
    }

    pub fn with_drift_map(mut self, map: DriftMap<T>) -> Self {
        self.drift_map = map;
        self
    }

    pub fn with_initial_wealth(mut self, x0: T) -> Self {
        self.initial_wealth = x0;
        self
    }

    pub fn with_initial_prices(mut self, prices: Vec<T>) -> Self {
        self.initial_prices = prices;
        self
    }

    pub fn with_ellipticity(mut self, c: T) -> Self {
        self.ellipticity = c;
        self
    }

    pub fn with_coefficient_bound(mut self, bound: T) -> Self {
        self.coefficient_bound = bound;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stocks == 0 {
            return Err(Error::InvalidSpec("need at least one stock".into()));
        }
        if !(self.horizon > T::zero()) {
            return Err(Error::InvalidSpec("horizon must be positive".into()));
        }
        if !(self.initial_wealth > T::zero()) {
            return Err(Error::InvalidSpec("initial wealth must be positive".into()));
        }
        if self.initial_prices.len() != self.n_stocks
            || self.initial_prices.iter().any(|p| !(*p > T::zero()))
        {
            return Err(Error::InvalidSpec(
                "need one positive initial price per stock".into(),
            ));
        }
        if !(self.ellipticity > T::zero()) {
            return Err(Error::InvalidSpec(
                "ellipticity constant must be positive".into(),
            ));
        }
        self.prior.validate(self.n_stocks, self.horizon)
    }

    /// Checks σ on the grid and tabulates it when it is deterministic.
    pub fn vol_field(&self, grid: &TimeGrid<T>) -> Result<VolField<T>> {
        if self.vol.is_path_independent() {
            let zeros = vec![T::zero(); self.n_stocks];
            let prefix = PathPrefix::new(self.n_stocks, &zeros);
            let table = (0..=grid.steps())
                .map(|k| {
                    let t = grid.time(k);
                    let sigma = self.vol.sigma(t, prefix);
                    if sigma.shape() != (self.n_stocks, self.n_stocks) {
                        return Err(Error::InvalidSpec("volatility must be n x n".into()));
                    }
                    LocalVol::evaluate(sigma, self.ellipticity, self.coefficient_bound, 0, k, t)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VolField::Tabulated(Arc::new(table)))
        } else {
            Ok(VolField::PathDependent {
                model: self.vol.clone(),
                ellipticity: self.ellipticity,
                bound: self.coefficient_bound,
            })
        }
    }

    pub fn checked_rate(&self, step: usize, t: T, prefix: PathPrefix<'_, T>) -> Result<T> {
        let r = self.rate.rate(t, prefix);
        if !r.is_finite() || r.abs() > self.coefficient_bound {
            return Err(Error::CoefficientBound {
                step,
                time: to_f64(t),
                what: "|r|",
                value: to_f64(r),
                bound: to_f64(self.coefficient_bound),
            });
        }
        Ok(r)
    }

    /// Whether σ is non-random (needed by the power-utility results).
    pub fn has_deterministic_vol(&self) -> bool {
        self.vol.is_path_independent()
    }

    pub fn zero_vector(&self) -> DVector<T> {
        DVector::zeros(self.n_stocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::prior::DiscretePrior;
    use crate::timefn::VecFn;

    fn point_prior() -> PriorSpec<f64> {
        PriorSpec::Discrete(DiscretePrior {
            atoms: vec![VecFn::constant(DVector::from_element(1, 0.0))],
            probs: vec![1.0],
        })
    }

    #[test]
    fn grid_rejects_non_divisible_step() {
        assert!(matches!(
            TimeGrid::new(1.0, 0.3),
            Err(Error::NonDivisibleStep { .. })
        ));
        let g = TimeGrid::new(1.0, 2f64.powi(-10)).unwrap();
        assert_eq!(g.steps(), 1024);
        assert_eq!(g.time(1024), 1.0);
        assert_eq!(g.index_of(0.5), 512);
    }

    #[test]
    fn vol_field_rejects_degenerate_sigma() {
        let spec = MarketSpec::single_stock(1e-5, 1.0, point_prior()).with_ellipticity(1e-6);
        let grid = TimeGrid::new(1.0, 0.25).unwrap();
        match spec.vol_field(&grid) {
            Err(Error::Ellipticity { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected ellipticity error, got {other:?}"),
        }
    }

    #[test]
    fn vol_field_rejects_oversized_sigma() {
        let spec = MarketSpec::single_stock(10.0, 1.0, point_prior()).with_coefficient_bound(5.0);
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        assert!(matches!(
            spec.vol_field(&grid),
            Err(Error::CoefficientBound { .. })
        ));
    }

    #[test]
    fn return_linked_vol_scales_rows() {
        let vol = ReturnLinkedVol {
            base: MatFn::constant(DMatrix::from_element(1, 1, 0.2)),
            sensitivity: 0.5,
        };
        let hist = [0.0, 100.0];
        let s: DMatrix<f64> = vol.sigma(0.0, PathPrefix::new(1, &hist));
        assert!((s[(0, 0)] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn validate_catches_bad_inputs() {
        let spec = MarketSpec::single_stock(0.2, 1.0, point_prior()).with_initial_wealth(0.0);
        assert!(spec.validate().is_err());
        let spec =
            MarketSpec::single_stock(0.2, 1.0, point_prior()).with_initial_prices(vec![-1.0]);
        assert!(spec.validate().is_err());
        assert!(MarketSpec::single_stock(0.2, 1.0, point_prior())
            .validate()
            .is_ok());
    }
}
