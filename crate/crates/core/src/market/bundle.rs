use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::model::TimeGrid;
use crate::market::prior::ParamDraw;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measure {
    /// Physical measure: drift drawn from the prior.
    P,
    /// Martingale measure: driftless excess returns.
    #[serde(rename = "Pstar")]
    PStar,
}

/// One simulated path on a uniform grid with `K` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePath<T: Real> {
    pub index: usize,
    pub n: usize,
    /// Excess returns `R(t_k)`, `k = 0..=K`, flattened.
    pub excess: Vec<T>,
    /// Rates `r(t_k)`, `k = 0..=K`.
    pub rates: Vec<T>,
    /// Brownian increments over `[t_k, t_{k+1})`, flattened.
    pub dw: Vec<T>,
    /// Realised drift `a(t_k)`, `k < K`; only under `P`.
    pub drift: Option<Vec<T>>,
    /// Realised parameter; only under `P`.
    pub param: Option<ParamDraw<T>>,
}

impl<T: Real> SamplePath<T> {
    pub fn steps(&self) -> usize {
        self.rates.len() - 1
    }

    #[inline]
    pub fn excess_at(&self, k: usize) -> &[T] {
        &self.excess[k * self.n..(k + 1) * self.n]
    }

    /// Prefix `R(t_0..=t_k)` as a flat slice.
    #[inline]
    pub fn excess_prefix(&self, k: usize) -> &[T] {
        &self.excess[..(k + 1) * self.n]
    }

    #[inline]
    pub fn increment_into(&self, k: usize, out: &mut [T]) {
        let n = self.n;
        for i in 0..n {
            out[i] = self.excess[(k + 1) * n + i] - self.excess[k * n + i];
        }
    }

    pub fn increment(&self, k: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.n];
        self.increment_into(k, &mut out);
        out
    }

    pub fn drift_at(&self, k: usize) -> Option<&[T]> {
        self.drift
            .as_ref()
            .map(|d| &d[k * self.n..(k + 1) * self.n])
    }

    pub fn terminal_excess(&self) -> &[T] {
        self.excess_at(self.steps())
    }
}

/// Simulated paths plus the metadata that reproduces them.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle<T: Real> {
    pub grid: TimeGrid<T>,
    pub measure: Measure,
    pub seed: u64,
    pub n_stocks: usize,
    pub paths: Vec<SamplePath<T>>,
}

impl<T: Real> PathBundle<T> {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Running realised covariation `Σ_{j<k} ΔR_j ΔR_j^T` per path, `k = 0..=K`.
pub fn quadratic_variation<T: Real>(bundle: &PathBundle<T>) -> Result<Vec<Vec<DMatrix<T>>>> {
    if bundle.grid.steps() < 1 {
        return Err(Error::GridMismatch(
            "quadratic variation needs at least two time points".into(),
        ));
    }
    let n = bundle.n_stocks;
    Ok(bundle
        .paths
        .iter()
        .map(|path| {
            let mut acc = DMatrix::zeros(n, n);
            let mut out = Vec::with_capacity(path.steps() + 1);
            out.push(acc.clone());
            let mut d = vec![T::zero(); n];
            for k in 0..path.steps() {
                path.increment_into(k, &mut d);
                for i in 0..n {
                    for j in 0..n {
                        acc[(i, j)] += d[i] * d[j];
                    }
                }
                out.push(acc.clone());
            }
            out
        })
        .collect())
}

/// `B(t_k) = exp(Σ_{j<k} r(t_j) dt)`, left-point rule, `B(0) = 1`.
pub fn discount_factors<T: Real>(rates: &[T], dt: T) -> Vec<T> {
    let mut out = Vec::with_capacity(rates.len());
    let mut integral = T::zero();
    out.push(T::one());
    for r in &rates[..rates.len() - 1] {
        integral += *r * dt;
        out.push(integral.exp());
    }
    out
}

pub fn rate_integral<T: Real>(bundle: &PathBundle<T>) -> Vec<Vec<T>> {
    let dt = bundle.grid.dt();
    bundle
        .paths
        .iter()
        .map(|p| discount_factors(&p.rates, dt))
        .collect()
}
