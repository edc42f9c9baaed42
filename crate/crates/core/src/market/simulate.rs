use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::mat_vec_into;
use crate::market::bundle::{Measure, PathBundle, SamplePath};
use crate::market::model::{MarketSpec, PathPrefix, TimeGrid, VolField};
use crate::market::prior::{ParamDraw, PriorSpec};
use crate::scalar::{lit, to_f64, Real};

/// Random inputs of one path: the parameter draw and the scaled Gaussian
/// increments. Kept separate from integration so that the same noise can be
/// replayed on coarser grids.
#[derive(Clone, Debug)]
pub struct PathNoise<T: Real> {
    pub draw: ParamDraw<T>,
    /// `Δw` on each step, already scaled by `sqrt(dt)`.
    pub dw: Vec<T>,
    /// Increments of the independent noise driving linear drift dynamics.
    pub state_dw: Option<Vec<T>>,
    pub steps: usize,
    n: usize,
}

impl<T: Real> PathNoise<T> {
    /// Noise for a coarser grid with `steps / factor` steps, summing blocks.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::GridMismatch(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.steps
            )));
        }
        let sum_blocks = |fine: &[T]| {
            let steps = self.steps / factor;
            let n = self.n;
            let mut out = vec![T::zero(); steps * n];
            for k in 0..steps {
                for j in 0..factor {
                    let src = (k * factor + j) * n;
                    for i in 0..n {
                        out[k * n + i] += fine[src + i];
                    }
                }
            }
            out
        };
        Ok(Self {
            draw: self.draw.clone(),
            dw: sum_blocks(&self.dw),
            state_dw: self.state_dw.as_deref().map(sum_blocks),
            steps: self.steps / factor,
            n: self.n,
        })
    }
}

/// Euler–Maruyama integrator for the excess-return equation on a fixed grid.
///
/// Each path draws from its own ChaCha stream selected by `(seed, index)`, so a
/// bundle is bit-for-bit reproducible and independent of scheduling.
#[derive(Clone, Debug)]
pub struct Simulator<'a, T: Real> {
    spec: &'a MarketSpec<T>,
    grid: TimeGrid<T>,
    measure: Measure,
    vol: VolField<T>,
}

impl<'a, T: Real> Simulator<'a, T> {
    pub fn new(spec: &'a MarketSpec<T>, grid: TimeGrid<T>, measure: Measure) -> Result<Self> {
        spec.validate()?;
        if (to_f64(grid.horizon()) - to_f64(spec.horizon)).abs() > 1e-12 * to_f64(spec.horizon) {
            return Err(Error::GridMismatch(
                "grid horizon differs from market horizon".into(),
            ));
        }
        let vol = spec.vol_field(&grid)?;
        Ok(Self {
            spec,
            grid,
            measure,
            vol,
        })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn vol_field(&self) -> &VolField<T> {
        &self.vol
    }

    pub fn spec(&self) -> &MarketSpec<T> {
        self.spec
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn rng(seed: u64, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Noise for path `index` on a grid with `steps` steps.
    pub fn noise_with_steps(&self, seed: u64, index: usize, steps: usize) -> PathNoise<T> {
        let mut rng = Self::rng(seed, index);
        let n = self.spec.n_stocks;
        // The parameter is always drawn so that P and P* paths share increments.
        let draw = self.spec.prior.draw(&mut rng, self.spec.horizon);
        let scale = (self.spec.horizon / lit::<T>(steps as f64)).sqrt();
        let dw = (0..steps * n)
            .map(|_| T::standard_normal(&mut rng) * scale)
            .collect();
        let state_dw = matches!(self.spec.prior, PriorSpec::OrnsteinUhlenbeck(_)).then(|| {
            (0..steps * n)
                .map(|_| T::standard_normal(&mut rng) * scale)
                .collect()
        });
        PathNoise {
            draw,
            dw,
            state_dw,
            steps,
            n,
        }
    }

    pub fn noise(&self, seed: u64, index: usize) -> PathNoise<T> {
        self.noise_with_steps(seed, index, self.grid.steps())
    }

    pub fn path(&self, seed: u64, index: usize) -> Result<SamplePath<T>> {
        let noise = self.noise(seed, index);
        self.integrate(&noise, index)
    }

    /// Runs the scheme with the given noise; `noise.steps` must match the grid.
    pub fn integrate(&self, noise: &PathNoise<T>, index: usize) -> Result<SamplePath<T>> {
        let steps = self.grid.steps();
        if noise.steps != steps {
            return Err(Error::GridMismatch(format!(
                "noise has {} steps, grid has {steps}",
                noise.steps
            )));
        }
        let spec = self.spec;
        let n = spec.n_stocks;
        let dt = self.grid.dt();
        let physical = self.measure == Measure::P;

        let mut excess = vec![T::zero(); (steps + 1) * n];
        let mut rates = vec![T::zero(); steps + 1];
        let mut drift = physical.then(|| vec![T::zero(); steps * n]);
        let mut a = vec![T::zero(); n];
        let mut shock = vec![T::zero(); n];
        let mut d_r = vec![T::zero(); n];

        let (mut ou_state, ou) = match (&noise.draw, &spec.prior) {
            (ParamDraw::Ou(a0), PriorSpec::OrnsteinUhlenbeck(c)) => {
                (a0.as_slice().to_vec(), Some(c))
            }
            _ => (Vec::new(), None),
        };

        for k in 0..steps {
            let t = self.grid.time(k);
            let (done, rest) = excess.split_at_mut((k + 1) * n);
            let prefix = PathPrefix::new(n, done);
            let local = self.vol.at(index, k, t, prefix)?;
            rates[k] = spec.checked_rate(k, t, prefix)?;

            if let Some(drift) = drift.as_mut() {
                self.drift_value(&noise.draw, &ou_state, t, prefix.current(), &mut a);
                drift[k * n..(k + 1) * n].copy_from_slice(&a);
            }
            mat_vec_into(&local.sigma, &noise.dw[k * n..(k + 1) * n], &mut shock);
            let current = &done[k * n..];
            for i in 0..n {
                let da = if physical { a[i] * dt } else { T::zero() };
                d_r[i] = da + shock[i];
                rest[i] = current[i] + d_r[i];
            }

            if let (Some(c), Some(state_dw)) = (ou, noise.state_dw.as_ref()) {
                let alpha = c.alpha.eval(t);
                let beta = c.beta.eval(t);
                let load = c.loading.eval(t);
                let target = c.target.eval(t);
                let gap: Vec<T> = (0..n).map(|i| target[i] - ou_state[i]).collect();
                let mut next = ou_state.clone();
                for i in 0..n {
                    for j in 0..n {
                        next[i] += alpha[(i, j)] * gap[j] * dt
                            + load[(i, j)] * d_r[j]
                            + beta[(i, j)] * state_dw[k * n + j];
                    }
                }
                ou_state = next;
            }
        }
        let full = PathPrefix::new(n, &excess);
        rates[steps] = spec.checked_rate(steps, self.grid.horizon(), full)?;

        Ok(SamplePath {
            index,
            n,
            excess,
            rates,
            dw: noise.dw.clone(),
            drift,
            param: physical.then(|| noise.draw.clone()),
        })
    }

    fn drift_value(&self, draw: &ParamDraw<T>, ou_state: &[T], t: T, current: &[T], out: &mut [T]) {
        match (draw, &self.spec.prior) {
            (ParamDraw::Atom(i), PriorSpec::Discrete(p)) => p.atoms[*i].eval_into(t, out),
            (ParamDraw::Vector(v), _) => out.copy_from_slice(v.as_slice()),
            (ParamDraw::Chain(path), PriorSpec::MarkovChain(c)) => {
                out.copy_from_slice(c.values[path.state_at(to_f64(t))].as_slice())
            }
            (ParamDraw::Ou(_), _) => {
                // Linear drift dynamics are the drift itself.
                out.copy_from_slice(ou_state);
                return;
            }
            _ => unreachable!("parameter draw does not match prior"),
        }
        self.spec.drift_map.apply_in_place(current, out);
    }

    /// Paths of the same noise on this grid and on grids refined by each factor
    /// in `refinements` (coarsest first). `self.grid` is the coarsest level.
    pub fn coupled(
        &self,
        seed: u64,
        index: usize,
        refinements: &[usize],
    ) -> Result<Vec<SamplePath<T>>> {
        let finest = refinements.iter().copied().max().unwrap_or(1);
        let fine_steps = self.grid.steps() * finest;
        let noise = self.noise_with_steps(seed, index, fine_steps);
        refinements
            .iter()
            .map(|&f| {
                if finest % f != 0 {
                    return Err(Error::GridMismatch(
                        "refinement factors must divide the finest".into(),
                    ));
                }
                let sim = Simulator::new(self.spec, self.grid.refine(f), self.measure)?;
                sim.integrate(&noise.coarsen(finest / f)?, index)
            })
            .collect()
    }

    pub fn bundle(&self, n_paths: usize, seed: u64) -> Result<PathBundle<T>> {
        if n_paths == 0 {
            return Err(Error::InvalidSpec("need at least one path".into()));
        }
        let paths = (0..n_paths)
            .into_par_iter()
            .map(|i| self.path(seed, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(PathBundle {
            grid: self.grid,
            measure: self.measure,
            seed,
            n_stocks: self.spec.n_stocks,
            paths,
        })
    }
}

/// Simulates `n_paths` paths with step `dt` under `measure`.
pub fn simulate_paths<T: Real>(
    spec: &MarketSpec<T>,
    dt: T,
    n_paths: usize,
    seed: u64,
    measure: Measure,
) -> Result<PathBundle<T>> {
    let grid = TimeGrid::new(spec.horizon, dt)?;
    Simulator::new(spec, grid, measure)?.bundle(n_paths, seed)
}

/// Log-Euler stock prices `S_i(t_k)`, which stay positive.
pub fn prices<T: Real>(
    spec: &MarketSpec<T>,
    grid: &TimeGrid<T>,
    vol: &VolField<T>,
    path: &SamplePath<T>,
) -> Result<Vec<T>> {
    let n = path.n;
    let dt = grid.dt();
    let half = lit::<T>(0.5);
    let mut out = Vec::with_capacity(path.excess.len());
    let mut log_s: Vec<T> = spec.initial_prices.iter().map(|p| p.ln()).collect();
    out.extend(spec.initial_prices.iter().copied());
    let mut d = vec![T::zero(); n];
    for k in 0..path.steps() {
        let prefix = PathPrefix::new(n, path.excess_prefix(k));
        let local = vol.at(path.index, k, grid.time(k), prefix)?;
        path.increment_into(k, &mut d);
        for i in 0..n {
            log_s[i] += d[i] + path.rates[k] * dt - half * local.cov[(i, i)] * dt;
            out.push(log_s[i].exp());
        }
    }
    Ok(out)
}
