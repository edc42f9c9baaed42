use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filters::{riccati_integrate, wonham_step, SimplexState, RICCATI_BOUND};
use crate::linalg::bilinear;
use crate::market::{
    ChainSpec, DriftMap, LocalVol, MarketSpec, OuCoefficients, PathPrefix, PriorSpec, TimeGrid,
    VolModel,
};
use crate::scalar::{lit, Real};
use crate::timefn::VecFn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// `y = (ŷ, ∫ŷ^T Q dR̃, exp(-½∫ŷ^T Q ŷ dt))`, `φ = y_{n+2} e^{y_{n+1}}`.
    KalmanOu,
    /// `y_i = z(θ_i, t)`, `φ = p^T y`.
    FinitePaths,
    /// `y = (posterior probabilities, R̃, Z̄)`, `φ = y_{d+2}`.
    MarkovChain,
    Custom,
}

type DriftFn<T> = dyn Fn(&[T], T, &mut [T]) + Send + Sync;
type LoadingFn<T> = dyn Fn(&[T], T, &LocalVol<T>, &mut DMatrix<T>) + Send + Sync;
type TerminalFn<T> = dyn Fn(&[T]) -> T + Send + Sync;

#[derive(Clone)]
enum Model<T: Real> {
    Kalman {
        coeffs: OuCoefficients<T>,
        gammas: Arc<Vec<DMatrix<T>>>,
        grid: TimeGrid<T>,
    },
    FinitePaths {
        atoms: Vec<VecFn<T>>,
        probs: Vec<T>,
    },
    Chain {
        chain: ChainSpec<T>,
        drift_map: DriftMap<T>,
    },
    Custom {
        drift: Arc<DriftFn<T>>,
        loading: Arc<LoadingFn<T>>,
        terminal: Arc<TerminalFn<T>>,
    },
}

/// Finite-dimensional state `dy = f(y,t) dt + L(y,t) dR̃` with `Z̄ = φ(y(T))`.
///
/// `L` is the loading on the observed increments (it already contains `Q`
/// where the state equation has one); the diffusion under `P*` is `b̄ = L σ`.
#[derive(Clone)]
pub struct MarkovEmbedding<T: Real> {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub n: usize,
    pub y0: DVector<T>,
    pub horizon: T,
    vol: Arc<dyn VolModel<T>>,
    ellipticity: T,
    coefficient_bound: T,
    model: Model<T>,
}

impl<T: Real> fmt::Debug for MarkovEmbedding<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarkovEmbedding")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .field("n", &self.n)
            .field("y0", &self.y0)
            .finish_non_exhaustive()
    }
}

/// Clamp to `[0, 1]`, the bounded stand-in for `ψ`.
#[inline]
fn psi<T: Real>(x: T) -> T {
    x.clamp(T::zero(), T::one())
}

impl<T: Real> MarkovEmbedding<T> {
    /// Builds the embedding of `kind` for the spec's prior. `grid` fixes the
    /// time points at which the Riccati solution is tabulated (Kalman only).
    pub fn build(spec: &MarketSpec<T>, kind: EmbeddingKind, grid: &TimeGrid<T>) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_stocks;
        let base = |dim: usize, y0: DVector<T>, model: Model<T>| Self {
            kind,
            dim,
            n,
            y0,
            horizon: spec.horizon,
            vol: spec.vol.clone(),
            ellipticity: spec.ellipticity,
            coefficient_bound: spec.coefficient_bound,
            model,
        };
        let deterministic = || {
            if spec.has_deterministic_vol() && spec.drift_map.is_identity() {
                Ok(())
            } else {
                Err(Error::Incompatible(format!(
                    "{kind:?} embedding needs deterministic volatility and the identity drift map"
                )))
            }
        };
        match (kind, &spec.prior) {
            (EmbeddingKind::FinitePaths, PriorSpec::Discrete(p)) => {
                deterministic()?;
                let d = p.atoms.len();
                Ok(base(
                    d,
                    DVector::from_element(d, T::one()),
                    Model::FinitePaths {
                        atoms: p.atoms.clone(),
                        probs: p.probs.clone(),
                    },
                ))
            }
            (
                EmbeddingKind::KalmanOu,
                PriorSpec::OrnsteinUhlenbeck(_) | PriorSpec::GaussianStatic(_),
            ) => {
                deterministic()?;
                let coeffs = match &spec.prior {
                    PriorSpec::OrnsteinUhlenbeck(c) => c.clone(),
                    PriorSpec::GaussianStatic(g) => {
                        OuCoefficients::static_prior(g.mean.clone(), g.cov.clone())
                    }
                    _ => unreachable!(),
                };
                if (grid.horizon() - spec.horizon).abs() > spec.horizon * lit(1e-12) {
                    return Err(Error::GridMismatch(
                        "embedding grid must span the horizon".into(),
                    ));
                }
                let field = spec.vol_field(grid)?;
                let origin = vec![T::zero(); n];
                let vol: Vec<LocalVol<T>> = (0..=grid.steps())
                    .map(|k| {
                        field
                            .at(0, k, grid.time(k), PathPrefix::new(n, &origin))
                            .map(|c| c.into_owned())
                    })
                    .collect::<Result<_>>()?;
                let gammas = riccati_integrate(&coeffs.cov0, &coeffs, grid, &vol, RICCATI_BOUND)?;
                let mut y0 = DVector::zeros(n + 2);
                y0.rows_mut(0, n).copy_from(&coeffs.mean0);
                y0[n + 1] = T::one();
                Ok(base(
                    n + 2,
                    y0,
                    Model::Kalman {
                        coeffs,
                        gammas: Arc::new(gammas),
                        grid: *grid,
                    },
                ))
            }
            (EmbeddingKind::MarkovChain, PriorSpec::MarkovChain(c)) => {
                if n != 1 {
                    return Err(Error::Incompatible(
                        "the chain embedding is stated for one stock".into(),
                    ));
                }
                let d = c.states();
                let mut y0 = DVector::zeros(d + 2);
                for (i, p) in c.initial.iter().enumerate() {
                    y0[i] = *p;
                }
                y0[d + 1] = T::one();
                Ok(base(
                    d + 2,
                    y0,
                    Model::Chain {
                        chain: c.clone(),
                        drift_map: spec.drift_map.clone(),
                    },
                ))
            }
            (EmbeddingKind::Custom, _) => Err(Error::Incompatible(
                "custom embeddings are built with MarkovEmbedding::custom".into(),
            )),
            _ => Err(Error::Incompatible(format!(
                "{kind:?} embedding does not match the prior"
            ))),
        }
    }

    /// An embedding given directly by its coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        y0: DVector<T>,
        n: usize,
        horizon: T,
        vol: Arc<dyn VolModel<T>>,
        drift: Arc<DriftFn<T>>,
        loading: Arc<LoadingFn<T>>,
        terminal: Arc<TerminalFn<T>>,
    ) -> Self {
        Self {
            kind: EmbeddingKind::Custom,
            dim: y0.len(),
            n,
            y0,
            horizon,
            vol,
            ellipticity: lit(1e-12),
            coefficient_bound: lit(1e12),
            model: Model::Custom {
                drift,
                loading,
                terminal,
            },
        }
    }

    /// Whether σ (and so every coefficient's σ-part) is a function of time only.
    /// Coordinates that stay strictly positive and are best gridded in `ln y`.
    pub fn log_coordinates(&self) -> Vec<bool> {
        match &self.model {
            Model::FinitePaths { .. } => vec![true; self.dim],
            _ => vec![false; self.dim],
        }
    }

    /// True when the generator does not depend on `t`.
    pub fn is_time_homogeneous(&self) -> bool {
        match &self.model {
            Model::FinitePaths { atoms, .. } => {
                self.vol.is_constant() && atoms.iter().all(|a| a.is_constant())
            }
            _ => false,
        }
    }

    pub fn has_deterministic_vol(&self) -> bool {
        self.vol.is_path_independent()
    }

    /// σ at `(y, t)`; the chain state carries `R̃` as coordinate `d + 1`.
    pub fn local_vol(&self, y: &[T], t: T) -> Result<LocalVol<T>> {
        let r = match &self.model {
            Model::Chain { chain, .. } => vec![y[chain.states()]],
            _ => vec![T::zero(); self.n],
        };
        let sigma = self.vol.sigma(t, PathPrefix::new(self.n, &r));
        LocalVol::checked(sigma, self.ellipticity, self.coefficient_bound, t)
    }

    fn gamma_at(gammas: &[DMatrix<T>], grid: &TimeGrid<T>, t: T) -> usize {
        let k = (t / grid.dt()).floor();
        let k = crate::scalar::to_f64(k).max(0.0) as usize;
        k.min(gammas.len() - 1)
    }

    fn chain_drifts(chain: &ChainSpec<T>, map: &DriftMap<T>, r: T) -> Vec<T> {
        chain
            .values
            .iter()
            .map(|v| {
                let mut a = [v[0]];
                map.apply_in_place(&[r], &mut a);
                a[0]
            })
            .collect()
    }

    /// `f(y, t)`.
    pub fn drift_into(&self, y: &[T], t: T, local: &LocalVol<T>, out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        let n = self.n;
        match &self.model {
            Model::FinitePaths { .. } => {}
            Model::Kalman {
                coeffs,
                gammas,
                grid,
            } => {
                let gamma = &gammas[Self::gamma_at(gammas, grid, t)];
                let mean = DVector::from_column_slice(&y[..n]);
                let gain = coeffs.loading.eval(t) * local.sigma.transpose() + gamma;
                let f = coeffs.alpha.eval(t) * (coeffs.target.eval(t) - &mean)
                    - gain * (&local.q * &mean);
                out[..n].copy_from_slice(f.as_slice());
                out[n + 1] = -lit::<T>(0.5) * psi(y[n + 1]) * bilinear(&y[..n], &local.q, &y[..n]);
            }
            Model::Chain { chain, drift_map } => {
                let d = chain.states();
                let q = local.q[(0, 0)];
                let drifts = Self::chain_drifts(chain, drift_map, y[d]);
                let a_hat = (0..d).fold(T::zero(), |acc, i| acc + drifts[i] * psi(y[i]));
                let g = chain.generator.eval(t);
                for i in 0..d {
                    let flow = (0..d).fold(T::zero(), |acc, k| acc + g[(k, i)] * y[k]);
                    out[i] = flow - y[i] * q * (drifts[i] - a_hat) * a_hat;
                }
            }
            Model::Custom { drift, .. } => drift(y, t, out),
        }
    }

    /// `L(y, t)`, `dim × n`.
    pub fn loading_into(&self, y: &[T], t: T, local: &LocalVol<T>, out: &mut DMatrix<T>) {
        out.fill(T::zero());
        let n = self.n;
        match &self.model {
            Model::FinitePaths { atoms, .. } => {
                let mut theta = vec![T::zero(); n];
                for (i, atom) in atoms.iter().enumerate() {
                    atom.eval_into(t, &mut theta);
                    for j in 0..n {
                        let qtheta =
                            (0..n).fold(T::zero(), |acc, k| acc + local.q[(j, k)] * theta[k]);
                        out[(i, j)] = y[i] * qtheta;
                    }
                }
            }
            Model::Kalman {
                coeffs,
                gammas,
                grid,
            } => {
                let gamma = &gammas[Self::gamma_at(gammas, grid, t)];
                let gain = (coeffs.loading.eval(t) * local.sigma.transpose() + gamma) * &local.q;
                out.view_mut((0, 0), (n, n)).copy_from(&gain);
                for j in 0..n {
                    out[(n, j)] = (0..n).fold(T::zero(), |acc, k| acc + y[k] * local.q[(k, j)]);
                }
            }
            Model::Chain { chain, drift_map } => {
                let d = chain.states();
                let q = local.q[(0, 0)];
                let drifts = Self::chain_drifts(chain, drift_map, y[d]);
                let a_hat = (0..d).fold(T::zero(), |acc, i| acc + drifts[i] * psi(y[i]));
                for i in 0..d {
                    out[(i, 0)] = y[i] * q * (drifts[i] - a_hat);
                }
                out[(d, 0)] = T::one();
                out[(d + 1, 0)] = y[d + 1] * a_hat * q;
            }
            Model::Custom { loading, .. } => loading(y, t, local, out),
        }
    }

    /// `a = ½ L σσ^T L^T`, written row-major into `out` (`dim²`).
    pub fn generator_into(
        &self,
        y: &[T],
        t: T,
        local: &LocalVol<T>,
        drift: &mut [T],
        a: &mut [T],
        scratch: &mut DMatrix<T>,
    ) {
        self.drift_into(y, t, local, drift);
        self.loading_into(y, t, local, scratch);
        let m = self.dim;
        let n = self.n;
        let half = lit::<T>(0.5);
        for i in 0..m {
            for j in i..m {
                let mut v = T::zero();
                for k in 0..n {
                    let lik = scratch[(i, k)];
                    if lik != T::zero() {
                        v += lik
                            * (0..n).fold(T::zero(), |acc, l| {
                                acc + local.cov[(k, l)] * scratch[(j, l)]
                            });
                    }
                }
                let v = v * half;
                a[i * m + j] = v;
                a[j * m + i] = v;
            }
        }
    }

    /// `φ(y)`.
    pub fn terminal(&self, y: &[T]) -> T {
        match &self.model {
            Model::FinitePaths { probs, .. } => probs
                .iter()
                .zip(y)
                .fold(T::zero(), |acc, (p, v)| acc + *p * *v),
            Model::Kalman { .. } => y[self.n + 1] * y[self.n].exp(),
            Model::Chain { chain, .. } => y[chain.states() + 1],
            Model::Custom { terminal, .. } => terminal(y),
        }
    }

    /// `(|b̄| + |f|) / (|y| + 1)` at one point, the quantity bounded by the
    /// linear-growth condition.
    pub fn growth_ratio(&self, y: &[T], t: T) -> Result<T> {
        let local = self.local_vol(y, t)?;
        let mut f = vec![T::zero(); self.dim];
        let mut l = DMatrix::zeros(self.dim, self.n);
        self.drift_into(y, t, &local, &mut f);
        self.loading_into(y, t, &local, &mut l);
        let bbar = &l * &local.sigma;
        let fy = f.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt();
        let ny = y.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt();
        Ok((bbar.norm() + fy) / (ny + T::one()))
    }

    /// Advances the state over one observation step. Likelihood coordinates
    /// use exact exponential updates so `φ(y)` reproduces the likelihood
    /// module's sums; the remaining coordinates take an Euler step (the chain
    /// probabilities use the Wonham step).
    pub fn advance(&self, y: &mut [T], t: T, local: &LocalVol<T>, d_r: &[T], dt: T) {
        let n = self.n;
        let half = lit::<T>(0.5);
        match &self.model {
            Model::FinitePaths { atoms, .. } => {
                let mut theta = vec![T::zero(); n];
                for (i, atom) in atoms.iter().enumerate() {
                    atom.eval_into(t, &mut theta);
                    let inc = bilinear(&theta, &local.q, d_r)
                        - half * bilinear(&theta, &local.q, &theta) * dt;
                    y[i] *= inc.exp();
                }
            }
            Model::Kalman {
                coeffs,
                gammas,
                grid,
            } => {
                let gamma = &gammas[Self::gamma_at(gammas, grid, t)];
                let mean = DVector::from_column_slice(&y[..n]);
                let innovation = DVector::from_column_slice(d_r) - &mean * dt;
                let gain = coeffs.loading.eval(t) * local.sigma.transpose() + gamma;
                let next = &mean
                    + coeffs.alpha.eval(t) * (coeffs.target.eval(t) - &mean) * dt
                    + gain * (&local.q * innovation);
                y[n] += bilinear(&y[..n], &local.q, d_r);
                y[n + 1] *= (-half * bilinear(&y[..n], &local.q, &y[..n]) * dt).exp();
                y[..n].copy_from_slice(next.as_slice());
            }
            Model::Chain { chain, drift_map } => {
                let d = chain.states();
                let q = local.q[(0, 0)];
                let drifts = Self::chain_drifts(chain, drift_map, y[d]);
                let probs: Vec<T> = y[..d].to_vec();
                let a_hat = (0..d).fold(T::zero(), |acc, i| acc + drifts[i] * probs[i]);
                let st = SimplexState { probs, t };
                let next = wonham_step(&st, chain, drift_map, y[d], q, d_r[0], dt);
                y[..d].copy_from_slice(&next.probs);
                y[d] += d_r[0];
                y[d + 1] *= (a_hat * q * d_r[0] - half * a_hat * a_hat * q * dt).exp();
            }
            Model::Custom { .. } => {
                let mut f = vec![T::zero(); self.dim];
                let mut l = DMatrix::zeros(self.dim, n);
                self.drift_into(y, t, local, &mut f);
                self.loading_into(y, t, local, &mut l);
                for i in 0..self.dim {
                    y[i] += f[i] * dt + (0..n).fold(T::zero(), |acc, j| acc + l[(i, j)] * d_r[j]);
                }
            }
        }
    }

    /// Per-coordinate `(lower, upper)` covering `width` standard deviations of
    /// `y(T)` under `P*` and the drift shifts of every prior atom under `P`.
    /// Coordinates flagged by [`Self::log_coordinates`] are sized in `ln y`.
    pub fn default_bounds(&self, width: T) -> Result<Vec<(T, T)>> {
        let n = self.n;
        let horizon = self.horizon;
        let half = lit::<T>(0.5);
        match &self.model {
            Model::FinitePaths { atoms, .. } => {
                let local = self.local_vol(&vec![T::zero(); self.dim], T::zero())?;
                let steps = 256usize;
                let dt = horizon / lit(steps as f64);
                let d = atoms.len();
                let mut cross = vec![vec![T::zero(); d]; d];
                for k in 0..steps {
                    let t = dt * lit(k as f64);
                    let lv = if self.has_deterministic_vol() {
                        self.local_vol(&vec![T::zero(); self.dim], t)?
                    } else {
                        local.clone()
                    };
                    let vals: Vec<DVector<T>> = atoms.iter().map(|a| a.eval(t)).collect();
                    for i in 0..d {
                        for j in 0..d {
                            cross[i][j] +=
                                bilinear(vals[i].as_slice(), &lv.q, vals[j].as_slice()) * dt;
                        }
                    }
                }
                // ln z_i(T) is Gaussian under P* and under each atom; cover all of them
                Ok((0..d)
                    .map(|i| {
                        let var = cross[i][i];
                        let sd = var.sqrt();
                        if sd < lit(1e-6) {
                            return (half, lit(1.5));
                        }
                        let (mut lo, mut hi) = (T::zero(), T::zero());
                        for shift in std::iter::once(T::zero()).chain((0..d).map(|j| cross[i][j])) {
                            let centre = shift - half * var;
                            lo = lo.min(centre - width * sd);
                            hi = hi.max(centre + width * sd);
                        }
                        (lo.exp(), hi.exp())
                    })
                    .collect())
            }
            Model::Kalman { coeffs, .. } => {
                let local = self.local_vol(&vec![T::zero(); self.dim], T::zero())?;
                let mut bounds = Vec::with_capacity(n + 2);
                let mut reach = T::zero();
                for i in 0..n {
                    let sd = coeffs.cov0[(i, i)].max(T::zero()).sqrt();
                    let sd = if sd > lit(1e-6) { sd } else { lit(1e-2) };
                    let lo = coeffs.mean0[i] - width * sd;
                    let hi = coeffs.mean0[i] + width * sd;
                    reach = reach.max(lo.abs()).max(hi.abs());
                    bounds.push((lo, hi));
                }
                let qmax = local.q.amax();
                let spread =
                    reach * (qmax * horizon).sqrt() * width + reach * reach * qmax * horizon;
                bounds.push((-spread, spread));
                bounds.push((
                    (-half * reach * reach * qmax * horizon * lit(n as f64)).exp() * half,
                    T::one(),
                ));
                Ok(bounds)
            }
            _ => Err(Error::Incompatible(
                "no default domain for this embedding; give explicit bounds".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{AffineVol, DiscretePrior, GaussianPrior};
    use nalgebra::dvector;

    fn single_atom(theta: f64) -> MarketSpec<f64> {
        let prior = PriorSpec::Discrete(DiscretePrior {
            atoms: vec![VecFn::constant(dvector![theta])],
            probs: vec![1.0],
        });
        MarketSpec::single_stock(0.2, 1.0, prior)
    }

    #[test]
    fn finite_paths_single_atom_shape() {
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let emb =
            MarkovEmbedding::build(&single_atom(0.1), EmbeddingKind::FinitePaths, &grid).unwrap();
        assert_eq!(emb.dim, 1);
        assert_eq!(emb.y0[0], 1.0);
        assert_eq!(emb.terminal(&[3.0]), 3.0);
        let local = emb.local_vol(&[1.0], 0.0).unwrap();
        let mut l = DMatrix::zeros(1, 1);
        emb.loading_into(&[2.0], 0.0, &local, &mut l);
        assert!((l[(0, 0)] - 2.0 * 0.1 * 25.0).abs() < 1e-12);
    }

    #[test]
    fn static_kalman_embedding_reduces_to_gain_times_innovation() {
        let prior = PriorSpec::GaussianStatic(GaussianPrior {
            mean: dvector![0.1],
            cov: DMatrix::from_element(1, 1, 0.0025),
        });
        let spec = MarketSpec::single_stock(0.2, 1.0, prior);
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let emb = MarkovEmbedding::build(&spec, EmbeddingKind::KalmanOu, &grid).unwrap();
        assert_eq!(emb.dim, 3);
        let y = [0.3, 0.0, 1.0];
        let local = emb.local_vol(&y, 0.0).unwrap();
        let mut f = vec![0.0f64; 3];
        emb.drift_into(&y, 0.0, &local, &mut f);
        assert!((f[0] + 0.0025 * 25.0 * 0.3).abs() < 1e-12);
        let mut l: DMatrix<f64> = DMatrix::zeros(3, 1);
        emb.loading_into(&y, 0.0, &local, &mut l);
        assert!((l[(0, 0)] - 0.0025 * 25.0).abs() < 1e-12);
        assert!((l[(1, 0)] - 0.3 * 25.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_variant_is_rejected() {
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        assert!(MarkovEmbedding::build(&single_atom(0.1), EmbeddingKind::KalmanOu, &grid).is_err());
        assert!(
            MarkovEmbedding::build(&single_atom(0.1), EmbeddingKind::MarkovChain, &grid).is_err()
        );
    }

    #[test]
    fn custom_embedding_is_evaluated() {
        let emb = MarkovEmbedding::custom(
            dvector![0.0],
            1,
            1.0,
            Arc::new(AffineVol::scalar(0.3)),
            Arc::new(|_: &[f64], _, out: &mut [f64]| out[0] = 0.0),
            Arc::new(|_: &[f64], _, _: &LocalVol<f64>, out: &mut DMatrix<f64>| out[(0, 0)] = 1.0),
            Arc::new(|y: &[f64]| (-y[0] * y[0]).exp()),
        );
        let local = emb.local_vol(&[0.0], 0.0).unwrap();
        let mut f = [1.0];
        let mut a = [0.0];
        let mut s = DMatrix::zeros(1, 1);
        emb.generator_into(&[0.5], 0.0, &local, &mut f, &mut a, &mut s);
        assert_eq!(f[0], 0.0);
        assert!((a[0] - 0.045).abs() < 1e-15);
    }
}
