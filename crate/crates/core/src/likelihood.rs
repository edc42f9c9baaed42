//! Likelihood processes `z(θ, t)` of each candidate drift along the observed
//! path, the mixture density `Z̄(t) = Σ w_i z(θ_i, t)` and its exponential
//! representation through the filtered drift.
//!
//! Everything is accumulated in the log domain: `log z` is a sum of
//! `θ^T Q dR - ½ θ^T Q θ dt` over the grid and is never exponentiated per step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{bilinear, is_positive_definite, log_sum_exp};
use crate::market::ChainSpec;
use crate::scalar::{lit, to_f64, Real};

/// `θ^T Q dR - ½ θ^T Q θ dt`.
pub fn log_z_increment<T: Real>(drift: &[T], q: &DMatrix<T>, d_r: &[T], dt: T) -> Result<T> {
    if q.shape() != (drift.len(), drift.len()) || d_r.len() != drift.len() {
        return Err(Error::GridMismatch(
            "dimension mismatch in likelihood increment".into(),
        ));
    }
    let asym = (q - q.transpose()).amax();
    if to_f64(asym) > 1e-10 * (1.0 + to_f64(q.amax())) || !is_positive_definite(q) {
        return Err(Error::NotPositiveDefinite(
            "Q in likelihood increment".into(),
        ));
    }
    Ok(log_z_increment_unchecked(drift, q, d_r, dt))
}

/// Same as [`log_z_increment`] for a `Q` already known to be positive definite.
#[inline]
pub fn log_z_increment_unchecked<T: Real>(drift: &[T], q: &DMatrix<T>, d_r: &[T], dt: T) -> T {
    bilinear(drift, q, d_r) - lit::<T>(0.5) * bilinear(drift, q, drift) * dt
}

/// Per-candidate running log-likelihoods and prior log-weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodState<T: Real> {
    log_weights: Vec<T>,
    log_z: Vec<T>,
    t: T,
}

impl<T: Real> LikelihoodState<T> {
    /// Fresh state at t = 0 with `z ≡ 1`.
    pub fn new(weights: &[T]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidSpec("empty mixture support".into()));
        }
        if weights.iter().any(|w| !(*w >= T::zero())) {
            return Err(Error::InvalidSpec(
                "mixture weights must be nonnegative".into(),
            ));
        }
        let total = weights.iter().fold(0.0, |a, w| a + to_f64(*w));
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "mixture weights sum to {total}"
            )));
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            log_z: vec![T::zero(); weights.len()],
            t: T::zero(),
        })
    }

    pub fn len(&self) -> usize {
        self.log_z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_z.is_empty()
    }

    pub fn t(&self) -> T {
        self.t
    }

    pub fn log_z(&self) -> &[T] {
        &self.log_z
    }

    pub fn log_weights(&self) -> &[T] {
        &self.log_weights
    }

    /// Advances every `log z_i` by one step; `drifts` holds `A(t, θ_i, R)`
    /// for each candidate, flattened (`len * n`).
    #[inline]
    pub fn advance(&mut self, drifts: &[T], q: &DMatrix<T>, d_r: &[T], dt: T) {
        let n = d_r.len();
        debug_assert_eq!(drifts.len(), n * self.log_z.len());
        for (i, lz) in self.log_z.iter_mut().enumerate() {
            *lz += log_z_increment_unchecked(&drifts[i * n..(i + 1) * n], q, d_r, dt);
        }
        self.t += dt;
    }

    /// Adds externally computed log-likelihood increments.
    pub fn advance_by(&mut self, increments: &[T], dt: T) {
        for (lz, inc) in self.log_z.iter_mut().zip(increments) {
            *lz += *inc;
        }
        self.t += dt;
    }

    /// Writes the posterior weights into `out` without allocating and returns
    /// `log Z̄`.
    pub fn posterior_weights_into(&self, out: &mut [T]) -> T {
        let mut max = T::min_value().unwrap();
        for (o, (w, z)) in out.iter_mut().zip(self.log_weights.iter().zip(&self.log_z)) {
            *o = *w + *z;
            if *o > max {
                max = *o;
            }
        }
        let mut total = T::zero();
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
        max + total.ln()
    }

    fn joint(&self) -> Vec<T> {
        self.log_weights
            .iter()
            .zip(&self.log_z)
            .map(|(w, z)| *w + *z)
            .collect()
    }

    pub fn log_mixture_density(&self) -> T {
        log_sum_exp(&self.joint())
    }

    /// `Z̄(t) = Σ w_i z_i`, via log-sum-exp.
    pub fn mixture_density(&self) -> T {
        self.log_mixture_density().exp()
    }

    /// Bayes posterior `w_i z_i / Z̄`.
    pub fn posterior_weights(&self) -> Vec<T> {
        let joint = self.joint();
        let norm = log_sum_exp(&joint);
        joint.into_iter().map(|j| (j - norm).exp()).collect()
    }
}

pub fn mixture_density<T: Real>(state: &LikelihoodState<T>) -> T {
    state.mixture_density()
}

/// Exponential form
/// `Z̄(t_k) = exp(Σ_{j<k} â_j^T Q_j ΔR_j - ½ Σ_{j<k} â_j^T Q_j â_j dt)`.
///
/// `estimates` holds `â(t_j)` for at least `j < K` (flattened, `n` per step),
/// `q_path` at least `K` matrices and `excess` exactly `K + 1` points.
pub fn zbar_exponential<T: Real>(
    estimates: &[T],
    q_path: &[DMatrix<T>],
    excess: &[T],
    n: usize,
    dt: T,
) -> Result<Vec<T>> {
    if n == 0 || !excess.len().is_multiple_of(n) || excess.len() < 2 * n {
        return Err(Error::GridMismatch(
            "excess path must hold at least two points".into(),
        ));
    }
    let steps = excess.len() / n - 1;
    if estimates.len() < steps * n || q_path.len() < steps {
        return Err(Error::GridMismatch(format!(
            "{} estimates / {} Q matrices for {steps} steps",
            estimates.len() / n,
            q_path.len()
        )));
    }
    let mut out = Vec::with_capacity(steps + 1);
    let mut log_z = T::zero();
    out.push(T::one());
    let mut d = vec![T::zero(); n];
    for k in 0..steps {
        for i in 0..n {
            d[i] = excess[(k + 1) * n + i] - excess[k * n + i];
        }
        log_z += log_z_increment_unchecked(&estimates[k * n..(k + 1) * n], &q_path[k], &d, dt);
        out.push(log_z.exp());
    }
    Ok(out)
}

/// Mixture density of a chain-valued drift: the sum over chain trajectories
/// (piecewise constant on the grid) of prior mass times likelihood, computed
/// by the forward recursion. `probs` is the normalised forward vector, i.e.
/// the discrete-time posterior of the current state.
#[derive(Clone, Debug)]
pub struct ChainLikelihood<T: Real> {
    pub probs: Vec<T>,
    pub log_density: T,
    pub t: T,
}

impl<T: Real> ChainLikelihood<T> {
    pub fn new(chain: &ChainSpec<T>) -> Self {
        Self {
            probs: chain.initial.clone(),
            log_density: T::zero(),
            t: T::zero(),
        }
    }

    /// `drifts[i]` is `A(t_k, θ_i, R)` for state i.
    pub fn advance(
        &mut self,
        chain: &ChainSpec<T>,
        drifts: &[DVector<T>],
        q: &DMatrix<T>,
        d_r: &[T],
        dt: T,
    ) {
        let incs: Vec<T> = drifts
            .iter()
            .map(|a| log_z_increment_unchecked(a.as_slice(), q, d_r, dt))
            .collect();
        let joint: Vec<T> = self
            .probs
            .iter()
            .zip(&incs)
            .map(|(p, inc)| {
                if *p > T::zero() {
                    p.ln() + *inc
                } else {
                    T::min_value().unwrap()
                }
            })
            .collect();
        let norm = log_sum_exp(&joint);
        let post: Vec<T> = joint.iter().map(|j| (*j - norm).exp()).collect();
        self.log_density += norm;
        self.probs = chain.propagate(self.t, dt, &post);
        self.t += dt;
    }

    pub fn density(&self) -> T {
        self.log_density.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn zero_parameter_has_zero_increment() {
        assert_eq!(
            log_z_increment(&[0.0], &q1(25.0), &[0.3], 0.01).unwrap(),
            0.0
        );
    }

    #[test]
    fn increment_direct_evaluation() {
        let v = log_z_increment(&[1.0], &q1(1.0), &[0.01], 0.01).unwrap();
        assert!((v - 0.005).abs() < 1e-15);
    }

    #[test]
    fn increment_rejects_non_pd_q() {
        assert!(log_z_increment(&[1.0], &q1(-1.0), &[0.01], 0.01).is_err());
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(log_z_increment(&[1.0, 0.0], &q, &[0.0, 0.0], 0.01).is_err());
    }

    #[test]
    fn constant_parameter_telescopes() {
        let theta = [0.2];
        let q = q1(25.0);
        let dt = 0.01;
        let increments = [0.01, -0.03, 0.02, 0.005, -0.001];
        let mut st = LikelihoodState::new(&[1.0]).unwrap();
        for d in increments {
            st.advance(&theta, &q, &[d], dt);
        }
        let r_t: f64 = increments.iter().sum();
        let expected = 0.2 * 25.0 * r_t - 0.5 * 0.04 * 25.0 * dt * increments.len() as f64;
        assert!((st.log_z()[0] - expected).abs() < 1e-14);
        assert!((st.mixture_density() - expected.exp()).abs() < 1e-14);
    }

    #[test]
    fn mixture_density_is_one_at_start() {
        let st = LikelihoodState::new(&[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(st.mixture_density(), 1.0);
        assert!(LikelihoodState::<f64>::new(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn single_atom_exponential_form_is_exact() {
        let excess = [0.0, 0.01, -0.02, 0.015];
        let q: Vec<_> = (0..3).map(|_| q1(25.0)).collect();
        let est = [0.1, 0.1, 0.1];
        let exp_form = zbar_exponential(&est, &q, &excess, 1, 0.1).unwrap();
        let mut st = LikelihoodState::new(&[1.0]).unwrap();
        for k in 0..3 {
            st.advance(&[0.1], &q[k], &[excess[k + 1] - excess[k]], 0.1);
            assert!((st.mixture_density() - exp_form[k + 1]).abs() < 1e-15);
        }
    }

    #[test]
    fn exponential_form_rejects_grid_mismatch() {
        let q = vec![q1(1.0)];
        assert!(zbar_exponential(&[0.0], &q, &[0.0, 0.1, 0.2], 1, 0.1).is_err());
    }

    #[test]
    fn zero_estimate_keeps_density_at_one() {
        let q = vec![q1(25.0)];
        let z = zbar_exponential(&[0.0], &q, &[0.0, 0.05], 1, 2f64.powi(-10)).unwrap();
        assert_eq!(z, vec![1.0, 1.0]);
    }

    #[test]
    fn single_precision_state_runs() {
        let mut st = crate::LikelihoodStateF32::new(&[0.5, 0.5]).unwrap();
        let q = DMatrix::from_element(1, 1, 25.0f32);
        st.advance(&[0.0, 0.2], &q, &[0.01], 0.01);
        let w = st.posterior_weights();
        assert!((w[0] + w[1] - 1.0).abs() < 1e-6);
        assert!(w[1] > w[0]);
    }

    proptest! {
        #[test]
        fn posterior_is_a_probability_vector(
            drifts in proptest::collection::vec(-1.0f64..1.0, 1..6),
            incs in proptest::collection::vec(-0.2f64..0.2, 1..40),
        ) {
            let m = drifts.len();
            let w = vec![1.0 / m as f64; m];
            let mut st = LikelihoodState::new(&w).unwrap();
            let q = q1(25.0);
            for d in incs {
                st.advance(&drifts, &q, &[d], 0.01);
                prop_assert!(st.mixture_density() > 0.0);
            }
            let post = st.posterior_weights();
            prop_assert!(post.iter().all(|p| *p >= 0.0));
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
