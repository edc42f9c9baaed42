use rayon::prelude::*;

use super::MarkovEmbedding;
use crate::error::{Error, Result};
use crate::harness::McEstimate;
use crate::market::{Simulator, TimeGrid};
use crate::scalar::{lit, to_f64, Real};

/// Inner Monte Carlo settings for the Feynman–Kac representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FkOptions {
    pub n_inner: usize,
    pub seed: u64,
    /// Time steps on `[0, T]`; the start time must be one of the grid points.
    pub steps: usize,
}

fn start_index<T: Real>(grid: &TimeGrid<T>, t: T) -> Result<usize> {
    let k = grid.index_of(t);
    if (to_f64(grid.time(k)) - to_f64(t)).abs() > 1e-9 * to_f64(grid.horizon()) {
        return Err(Error::GridMismatch(format!(
            "t = {} is not on the {}-step grid",
            to_f64(t),
            grid.steps()
        )));
    }
    Ok(k)
}

fn normals<T: Real>(seed: u64, index: usize, count: usize) -> Vec<T> {
    let mut rng = Simulator::<T>::rng(seed, index);
    (0..count).map(|_| T::standard_normal(&mut rng)).collect()
}

/// Runs every start point in `starts` with the same driftless noise and
/// returns the terminal states.
fn run<T: Real>(
    emb: &MarkovEmbedding<T>,
    starts: &[Vec<T>],
    grid: &TimeGrid<T>,
    k0: usize,
    noise: &[T],
) -> Result<Vec<Vec<T>>> {
    let n = emb.n;
    let dt = grid.dt();
    let sqdt = dt.sqrt();
    let mut d_r = vec![T::zero(); n];
    starts
        .iter()
        .map(|start| {
            let mut y = start.clone();
            for (j, k) in (k0..grid.steps()).enumerate() {
                let t = grid.time(k);
                let local = emb.local_vol(&y, t)?;
                for i in 0..n {
                    d_r[i] = (0..n).fold(T::zero(), |acc, c| {
                        acc + local.sigma[(i, c)] * noise[j * n + c]
                    }) * sqdt;
                }
                emb.advance(&mut y, t, &local, &d_r, dt);
            }
            Ok(y)
        })
        .collect()
}

/// `V(y, t) = E_* C(y^{y,t}(T))` by simulating the embedding with `dR̃ = σ dw`.
pub fn feynman_kac_value<T: Real>(
    emb: &MarkovEmbedding<T>,
    claim: &(dyn Fn(&[T]) -> T + Sync),
    y: &[T],
    t: T,
    opts: FkOptions,
) -> Result<McEstimate> {
    let grid = TimeGrid::with_steps(emb.horizon, opts.steps)?;
    let k0 = start_index(&grid, t)?;
    let count = (grid.steps() - k0) * emb.n;
    let samples: Vec<f64> = (0..opts.n_inner)
        .into_par_iter()
        .map(|i| {
            let noise = normals::<T>(opts.seed, i, count);
            run(emb, &[y.to_vec()], &grid, k0, &noise).map(|ends| to_f64(claim(&ends[0])))
        })
        .collect::<Result<_>>()?;
    McEstimate::from_samples("feynman_kac_value", &samples)
}

/// `∂V/∂y_j` by central differences with step `10⁻³(1 + |y_j|)`, both sides
/// driven by the same noise.
pub fn feynman_kac_gradient<T: Real>(
    emb: &MarkovEmbedding<T>,
    claim: &(dyn Fn(&[T]) -> T + Sync),
    y: &[T],
    t: T,
    opts: FkOptions,
) -> Result<Vec<McEstimate>> {
    let grid = TimeGrid::with_steps(emb.horizon, opts.steps)?;
    let k0 = start_index(&grid, t)?;
    let m = y.len();
    let steps: Vec<T> = y
        .iter()
        .map(|v| lit::<T>(1e-3) * (T::one() + v.abs()))
        .collect();
    let mut starts = Vec::with_capacity(2 * m);
    for j in 0..m {
        for sign in [T::one(), -T::one()] {
            let mut s = y.to_vec();
            s[j] += sign * steps[j];
            starts.push(s);
        }
    }
    let count = (grid.steps() - k0) * emb.n;
    let per_sample: Vec<Vec<f64>> = (0..opts.n_inner)
        .into_par_iter()
        .map(|i| {
            let noise = normals::<T>(opts.seed, i, count);
            let ends = run(emb, &starts, &grid, k0, &noise)?;
            Ok((0..m)
                .map(|j| {
                    to_f64((claim(&ends[2 * j]) - claim(&ends[2 * j + 1])) / (steps[j] + steps[j]))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    (0..m)
        .map(|j| {
            let col: Vec<f64> = per_sample.iter().map(|s| s[j]).collect();
            McEstimate::from_samples(format!("dV/dy_{}", j + 1), &col)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{DiscretePrior, MarketSpec, PriorSpec};
    use crate::pde::EmbeddingKind;
    use crate::timefn::VecFn;
    use nalgebra::dvector;

    fn embedding() -> MarkovEmbedding<f64> {
        let prior = PriorSpec::Discrete(DiscretePrior {
            atoms: vec![
                VecFn::constant(dvector![0.0]),
                VecFn::constant(dvector![0.2]),
            ],
            probs: vec![0.5, 0.5],
        });
        let spec = MarketSpec::single_stock(0.2, 1.0, prior);
        let grid = TimeGrid::new(1.0, 1.0 / 64.0).unwrap();
        MarkovEmbedding::build(&spec, EmbeddingKind::FinitePaths, &grid).unwrap()
    }

    #[test]
    fn constant_claim_has_zero_variance() {
        let emb = embedding();
        let opts = FkOptions {
            n_inner: 50,
            seed: 3,
            steps: 64,
        };
        let v = feynman_kac_value(&emb, &|_: &[f64]| 2.5, &[1.0, 1.0], 0.0, opts).unwrap();
        assert_eq!(v.mean, 2.5);
        assert_eq!(v.se, 0.0);
    }

    #[test]
    fn linear_claim_is_a_martingale() {
        let emb = embedding();
        let opts = FkOptions {
            n_inner: 4000,
            seed: 5,
            steps: 64,
        };
        let y = [1.0, 1.3];
        let v = feynman_kac_value(&emb, &|y: &[f64]| y[0] + 2.0 * y[1], &y, 0.5, opts).unwrap();
        assert!(v.within(3.6, 4.0, 0.0), "{v:?}");
        let g = feynman_kac_gradient(&emb, &|y: &[f64]| y[0] + 2.0 * y[1], &y, 0.5, opts).unwrap();
        assert!((g[0].mean - 1.0).abs() < 1e-9);
        assert!(g[1].within(2.0, 4.0, 0.0), "{:?}", g[1]);
    }

    #[test]
    fn off_grid_start_is_rejected() {
        let emb = embedding();
        let opts = FkOptions {
            n_inner: 10,
            seed: 1,
            steps: 4,
        };
        assert!(feynman_kac_value(&emb, &|_: &[f64]| 1.0, &[1.0, 1.0], 0.3, opts).is_err());
    }
}
