use nalgebra::DVector;

use super::{DriftFilter, FilterState, Posterior};
use crate::error::{Error, Result};
use crate::likelihood::ChainLikelihood;
use crate::market::{ChainSpec, DriftMap, LocalVol};
use crate::scalar::Real;

/// Posterior probabilities of the chain states.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexState<T: Real> {
    pub probs: Vec<T>,
    pub t: T,
}

fn chain_drifts<T: Real>(chain: &ChainSpec<T>, map: &DriftMap<T>, current: T) -> Vec<T> {
    chain
        .values
        .iter()
        .map(|v| {
            let mut a = [v[0]];
            map.apply_in_place(&[current], &mut a);
            a[0]
        })
        .collect()
}

fn weighted<T: Real>(probs: &[T], drifts: &[T]) -> T {
    probs
        .iter()
        .zip(drifts)
        .fold(T::zero(), |acc, (p, a)| acc + *p * *a)
}

/// One step of the Wonham filter for a single stock, `q = 1/σ²`.
///
/// The prior part `dy_i = Σ_k l_ki y_k dt` is advanced by one RK4 step, the
/// innovation `y_i q (A_i - â)(dR̃ - â dt)` by Euler; each coordinate is then
/// clamped to `[0, 1]` and the vector renormalised.
pub fn wonham_step<T: Real>(
    state: &SimplexState<T>,
    chain: &ChainSpec<T>,
    drift_map: &DriftMap<T>,
    current: T,
    q: T,
    d_r: T,
    dt: T,
) -> SimplexState<T> {
    let drifts = chain_drifts(chain, drift_map, current);
    let a_hat = weighted(&state.probs, &drifts);
    let mut probs = chain.propagate(state.t, dt, &state.probs);
    let innovation = q * (d_r - a_hat * dt);
    for (i, p) in probs.iter_mut().enumerate() {
        *p += state.probs[i] * (drifts[i] - a_hat) * innovation;
        *p = p.clamp(T::zero(), T::one());
    }
    let total = probs.iter().fold(T::zero(), |acc, p| acc + *p);
    for p in probs.iter_mut() {
        *p /= total;
    }
    SimplexState {
        probs,
        t: state.t + dt,
    }
}

#[derive(Clone, Debug)]
pub struct WonhamFilter<T: Real> {
    chain: ChainSpec<T>,
    drift_map: DriftMap<T>,
    state: SimplexState<T>,
}

impl<T: Real> WonhamFilter<T> {
    pub fn new(chain: ChainSpec<T>, drift_map: DriftMap<T>, n_stocks: usize) -> Result<Self> {
        if n_stocks != 1 {
            return Err(Error::Incompatible(
                "the Wonham filter is implemented for one stock".into(),
            ));
        }
        let state = SimplexState {
            probs: chain.initial.clone(),
            t: T::zero(),
        };
        Ok(Self {
            chain,
            drift_map,
            state,
        })
    }

    pub fn simplex(&self) -> &SimplexState<T> {
        &self.state
    }
}

impl<T: Real> DriftFilter<T> for WonhamFilter<T> {
    fn variant(&self) -> &'static str {
        "wonham"
    }

    fn t(&self) -> T {
        self.state.t
    }

    fn estimate_into(&mut self, current: &[T], out: &mut [T]) {
        let drifts = chain_drifts(&self.chain, &self.drift_map, current[0]);
        out[0] = weighted(&self.state.probs, &drifts);
    }

    fn advance(&mut self, current: &[T], local: &LocalVol<T>, d_r: &[T], dt: T) -> Result<()> {
        self.state = wonham_step(
            &self.state,
            &self.chain,
            &self.drift_map,
            current[0],
            local.q[(0, 0)],
            d_r[0],
            dt,
        );
        Ok(())
    }

    fn state(&mut self, current: &[T]) -> FilterState<T> {
        FilterState {
            t: self.state.t,
            estimate: self.estimate(current),
            posterior: Posterior::Simplex {
                probs: self.state.probs.clone(),
            },
        }
    }
}

/// Exact posterior of a chain that only switches at grid points, via the
/// forward recursion; also carries the mixture density.
#[derive(Clone, Debug)]
pub struct ChainForwardFilter<T: Real> {
    chain: ChainSpec<T>,
    drift_map: DriftMap<T>,
    forward: ChainLikelihood<T>,
}

impl<T: Real> ChainForwardFilter<T> {
    pub fn new(chain: ChainSpec<T>, drift_map: DriftMap<T>) -> Self {
        let forward = ChainLikelihood::new(&chain);
        Self {
            chain,
            drift_map,
            forward,
        }
    }

    fn drifts(&self, current: &[T]) -> Vec<DVector<T>> {
        self.chain
            .values
            .iter()
            .map(|v| {
                let mut a = v.clone();
                self.drift_map.apply_in_place(current, a.as_mut_slice());
                a
            })
            .collect()
    }
}

impl<T: Real> DriftFilter<T> for ChainForwardFilter<T> {
    fn variant(&self) -> &'static str {
        "forward"
    }

    fn t(&self) -> T {
        self.forward.t
    }

    fn estimate_into(&mut self, current: &[T], out: &mut [T]) {
        let drifts = self.drifts(current);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (p, a) in self.forward.probs.iter().zip(&drifts) {
            for (o, v) in out.iter_mut().zip(a.iter()) {
                *o += *p * *v;
            }
        }
    }

    fn advance(&mut self, current: &[T], local: &LocalVol<T>, d_r: &[T], dt: T) -> Result<()> {
        let drifts = self.drifts(current);
        self.forward
            .advance(&self.chain, &drifts, &local.q, d_r, dt);
        Ok(())
    }

    fn state(&mut self, current: &[T]) -> FilterState<T> {
        FilterState {
            t: self.forward.t,
            estimate: self.estimate(current),
            posterior: Posterior::Simplex {
                probs: self.forward.probs.clone(),
            },
        }
    }

    fn log_density(&self) -> Option<T> {
        Some(self.forward.log_density)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timefn::MatFn;
    use nalgebra::{dvector, DMatrix};

    fn chain(rate: f64, values: [f64; 2], initial: [f64; 2]) -> ChainSpec<f64> {
        ChainSpec {
            values: vec![dvector![values[0]], dvector![values[1]]],
            generator: MatFn::constant(DMatrix::from_row_slice(2, 2, &[-rate, rate, rate, -rate])),
            initial: initial.to_vec(),
        }
    }

    #[test]
    fn certainty_is_absorbing_for_a_frozen_chain() {
        let c = chain(0.0, [0.0, 0.2], [1.0, 0.0]);
        let mut st = SimplexState {
            probs: vec![1.0, 0.0],
            t: 0.0,
        };
        for d in [0.05, -0.1, 0.2] {
            st = wonham_step(&st, &c, &DriftMap::Identity, 0.0, 25.0, d, 0.01);
        }
        assert_eq!(st.probs, vec![1.0, 0.0]);
    }

    #[test]
    fn large_innovation_stays_on_the_simplex() {
        let c = chain(1.0, [-1.0, 1.0], [0.5, 0.5]);
        let st = SimplexState {
            probs: vec![0.5, 0.5],
            t: 0.0,
        };
        let next = wonham_step(&st, &c, &DriftMap::Identity, 0.0, 1e4, 1.0, 0.1);
        assert!(next.probs.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!((next.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_filter_density_starts_at_one() {
        let c = chain(1.0, [0.0, 0.2], [0.5, 0.5]);
        let f = ChainForwardFilter::new(c, DriftMap::Identity);
        assert_eq!(f.log_density(), Some(0.0));
    }
}
