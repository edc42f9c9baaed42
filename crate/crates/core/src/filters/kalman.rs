use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{DriftFilter, FilterState, Posterior};
use crate::error::{Error, Result};
use crate::linalg::{frobenius, min_eigenvalue, symmetrize};
use crate::market::{LocalVol, OuCoefficients, TimeGrid};
use crate::scalar::{lit, to_f64, Real};

/// Blow-up threshold on `‖γ‖_F`.
pub const RICCATI_BOUND: f64 = 1e8;

/// Conditional law `N(mean, cov)` of the drift given the observations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
    pub t: T,
}

impl<T: Real> GaussianState<T> {
    pub fn initial(coeffs: &OuCoefficients<T>) -> Self {
        Self {
            mean: coeffs.mean0.clone(),
            cov: coeffs.cov0.clone(),
            t: T::zero(),
        }
    }
}

/// `-(bσ^T + γ) Q (bσ^T + γ)^T - αγ - γα^T + ββ^T` at time `t`.
pub fn riccati_rhs<T: Real>(
    gamma: &DMatrix<T>,
    coeffs: &OuCoefficients<T>,
    t: T,
    sigma: &DMatrix<T>,
    q: &DMatrix<T>,
) -> DMatrix<T> {
    let alpha = coeffs.alpha.eval(t);
    let beta = coeffs.beta.eval(t);
    let gain = coeffs.loading.eval(t) * sigma.transpose() + gamma;
    let ag = &alpha * gamma;
    -(&gain * q * gain.transpose()) - &ag - ag.transpose() + &beta * beta.transpose()
}

fn check_gamma<T: Real>(gamma: &DMatrix<T>, t: T, bound: f64) -> Result<()> {
    let norm = to_f64(frobenius(gamma));
    if !norm.is_finite() || norm > bound {
        return Err(Error::Riccati {
            time: to_f64(t),
            reason: format!("|gamma| = {norm:e} exceeds {bound:e}"),
        });
    }
    let min = to_f64(min_eigenvalue(gamma));
    if min < -1e-10 * (1.0 + norm) {
        return Err(Error::Riccati {
            time: to_f64(t),
            reason: format!(
                "covariance lost positive semidefiniteness (eigenvalue {min:e}); reduce dt"
            ),
        });
    }
    Ok(())
}

fn riccati_rk4<T: Real>(
    gamma: &DMatrix<T>,
    coeffs: &OuCoefficients<T>,
    t: T,
    dt: T,
    local: &LocalVol<T>,
) -> DMatrix<T> {
    let half = lit::<T>(0.5);
    let f = |g: &DMatrix<T>, s: T| riccati_rhs(g, coeffs, s, &local.sigma, &local.q);
    let k1 = f(gamma, t);
    let k2 = f(&(gamma + &k1 * (dt * half)), t + dt * half);
    let k3 = f(&(gamma + &k2 * (dt * half)), t + dt * half);
    let k4 = f(&(gamma + &k3 * dt), t + dt);
    symmetrize(&(gamma + (k1 + (k2 + k3) * lit::<T>(2.0) + k4) * (dt / lit(6.0))))
}

/// `γ(t_k)` for every grid point, with `vol[k]` the volatility used on
/// `[t_k, t_{k+1}]`.
pub fn riccati_integrate<T: Real>(
    gamma0: &DMatrix<T>,
    coeffs: &OuCoefficients<T>,
    grid: &TimeGrid<T>,
    vol: &[LocalVol<T>],
    bound: f64,
) -> Result<Vec<DMatrix<T>>> {
    if vol.len() < grid.steps() {
        return Err(Error::GridMismatch(format!(
            "{} volatility points for {} steps",
            vol.len(),
            grid.steps()
        )));
    }
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.steps() + 1);
    let mut gamma = symmetrize(gamma0);
    check_gamma(&gamma, T::zero(), bound)?;
    out.push(gamma.clone());
    for (k, local) in vol.iter().take(grid.steps()).enumerate() {
        let t = grid.time(k);
        gamma = riccati_rk4(&gamma, coeffs, t, dt, local);
        check_gamma(&gamma, grid.time(k + 1), bound)?;
        out.push(gamma.clone());
    }
    Ok(out)
}

fn mean_step<T: Real>(
    state: &GaussianState<T>,
    coeffs: &OuCoefficients<T>,
    local: &LocalVol<T>,
    d_r: &[T],
    dt: T,
) -> DVector<T> {
    let t = state.t;
    let innovation = DVector::from_column_slice(d_r) - &state.mean * dt;
    let gain = coeffs.loading.eval(t) * local.sigma.transpose() + &state.cov;
    let reversion = coeffs.alpha.eval(t) * (coeffs.target.eval(t) - &state.mean) * dt;
    &state.mean + reversion + gain * (&local.q * innovation)
}

/// One observation step:
/// `dŷ = α(δ - ŷ)dt + (bσ^T + γ)Q(dR̃ - ŷ dt)`, covariance by RK4 on the
/// Riccati equation over the same step.
pub fn kalman_step<T: Real>(
    state: &GaussianState<T>,
    coeffs: &OuCoefficients<T>,
    local: &LocalVol<T>,
    d_r: &[T],
    dt: T,
) -> Result<GaussianState<T>> {
    let t = state.t;
    let mean = mean_step(state, coeffs, local, d_r, dt);
    let cov = riccati_rk4(&state.cov, coeffs, t, dt, local);
    check_gamma(&cov, t + dt, RICCATI_BOUND)?;
    Ok(GaussianState {
        mean,
        cov,
        t: t + dt,
    })
}

/// `γ(t_k)` on a grid with deterministic volatility. The covariance does not
/// depend on the observations, so one table serves every path.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceTable<T: Real> {
    dt: T,
    gammas: Vec<DMatrix<T>>,
}

impl<T: Real> CovarianceTable<T> {
    pub fn new(coeffs: &OuCoefficients<T>, grid: &TimeGrid<T>, vol: &[LocalVol<T>]) -> Result<Self> {
        Ok(Self {
            dt: grid.dt(),
            gammas: riccati_integrate(&coeffs.cov0, coeffs, grid, vol, RICCATI_BOUND)?,
        })
    }

    pub fn gammas(&self) -> &[DMatrix<T>] {
        &self.gammas
    }
}

#[derive(Clone, Debug)]
pub struct KalmanFilter<T: Real> {
    coeffs: OuCoefficients<T>,
    state: GaussianState<T>,
    table: Option<Arc<CovarianceTable<T>>>,
    step: usize,
}

impl<T: Real> KalmanFilter<T> {
    pub fn new(coeffs: OuCoefficients<T>) -> Self {
        let state = GaussianState::initial(&coeffs);
        Self {
            coeffs,
            state,
            table: None,
            step: 0,
        }
    }

    /// Reads `γ` from `table` while the step size matches it; other steps
    /// integrate the Riccati equation.
    pub fn with_table(coeffs: OuCoefficients<T>, table: Arc<CovarianceTable<T>>) -> Self {
        Self {
            table: Some(table),
            ..Self::new(coeffs)
        }
    }

    pub fn gaussian(&self) -> &GaussianState<T> {
        &self.state
    }
}

impl<T: Real> DriftFilter<T> for KalmanFilter<T> {
    fn variant(&self) -> &'static str {
        "kalman"
    }

    fn t(&self) -> T {
        self.state.t
    }

    fn estimate_into(&mut self, _current: &[T], out: &mut [T]) {
        out.copy_from_slice(self.state.mean.as_slice());
    }

    fn advance(&mut self, _current: &[T], local: &LocalVol<T>, d_r: &[T], dt: T) -> Result<()> {
        let k = self.step;
        self.step += 1;
        if let Some(table) = &self.table {
            if table.dt == dt && k + 1 < table.gammas.len() {
                self.state = GaussianState {
                    mean: mean_step(&self.state, &self.coeffs, local, d_r, dt),
                    cov: table.gammas[k + 1].clone(),
                    t: self.state.t + dt,
                };
                return Ok(());
            }
            self.table = None;
        }
        self.state = kalman_step(&self.state, &self.coeffs, local, d_r, dt)?;
        Ok(())
    }

    fn state(&mut self, _current: &[T]) -> FilterState<T> {
        FilterState {
            t: self.state.t,
            estimate: self.state.mean.clone(),
            posterior: Posterior::Gaussian {
                mean: self.state.mean.clone(),
                cov: self.state.cov.clone(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timefn::{MatFn, VecFn};
    use nalgebra::dvector;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn local(sigma: f64) -> LocalVol<f64> {
        LocalVol {
            sigma: scalar(sigma),
            cov: scalar(sigma * sigma),
            q: scalar(1.0 / (sigma * sigma)),
        }
    }

    #[test]
    fn zero_uncertainty_follows_the_mean_ode() {
        let coeffs = OuCoefficients {
            alpha: MatFn::constant(scalar(2.0)),
            beta: MatFn::zeros(1, 1),
            loading: MatFn::zeros(1, 1),
            target: VecFn::constant(dvector![0.3]),
            mean0: dvector![0.0],
            cov0: scalar(0.0),
        };
        let mut st = GaussianState::initial(&coeffs);
        let dt = 1e-3;
        let mut expected = 0.0;
        for _ in 0..100 {
            st = kalman_step(&st, &coeffs, &local(0.2), &[0.05], dt).unwrap();
            expected += 2.0 * (0.3 - expected) * dt;
        }
        assert_eq!(st.cov[(0, 0)], 0.0);
        assert!((st.mean[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let coeffs = OuCoefficients::static_prior(dvector![0.1], scalar(0.0));
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let vol = vec![local(0.2); 100];
        let path = riccati_integrate(&coeffs.cov0, &coeffs, &grid, &vol, RICCATI_BOUND).unwrap();
        assert!(path.iter().all(|g| g[(0, 0)] == 0.0));
    }

    #[test]
    fn static_gain_is_the_covariance() {
        let coeffs = OuCoefficients::static_prior(dvector![0.1], scalar(0.01));
        let st = GaussianState::initial(&coeffs);
        let next = kalman_step(&st, &coeffs, &local(0.2), &[0.02], 0.01).unwrap();
        let expected = 0.1 + 0.01 * 25.0 * (0.02 - 0.1 * 0.01);
        assert!((next.mean[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn negative_covariance_is_rejected() {
        let coeffs = OuCoefficients::static_prior(dvector![0.0], scalar(-1.0));
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let vol = vec![local(0.2); 2];
        assert!(riccati_integrate(&coeffs.cov0, &coeffs, &grid, &vol, RICCATI_BOUND).is_err());
    }

    #[test]
    fn covariance_table_reproduces_the_step_by_step_filter() {
        let coeffs = OuCoefficients::static_prior(dvector![0.1], scalar(0.0025));
        let grid = TimeGrid::new(1.0, 1.0 / 64.0).unwrap();
        let vol = vec![local(0.2); 64];
        let table = Arc::new(CovarianceTable::new(&coeffs, &grid, &vol).unwrap());
        let mut a = KalmanFilter::new(coeffs.clone());
        let mut b = KalmanFilter::with_table(coeffs, table);
        for k in 0..64 {
            let d = [0.01 * (k as f64).cos()];
            a.advance(&[0.0], &vol[k], &d, grid.dt()).unwrap();
            b.advance(&[0.0], &vol[k], &d, grid.dt()).unwrap();
            assert_eq!(a.gaussian(), b.gaussian());
        }
        // a different step size falls back to integration
        let mut c = KalmanFilter::with_table(a.coeffs.clone(), b.table.clone().unwrap());
        c.advance(&[0.0], &vol[0], &[0.0], 0.5 * grid.dt()).unwrap();
        assert!(c.table.is_none());
    }
}
