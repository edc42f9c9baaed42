use nalgebra::{DMatrix, DVector};

use super::{DriftFilter, FilterState, KalmanFilter, MixtureFilter};
use crate::error::{Error, Result};
use crate::likelihood::LikelihoodState;
use crate::linalg::{bilinear, log_sum_exp, min_eigenvalue, spd_inverse, spd_log_det, symmetrize};
use crate::market::{DriftMap, LocalVol, OuCoefficients, PriorSpec, TimeGrid};
use crate::quadrature::gaussian_atoms;
use crate::scalar::{from_usize, lit, to_f64, Real};
use crate::timefn::VecFn;

/// Smallest admissible eigenvalue of the joint precision.
const PRECISION_FLOOR: f64 = 1e-12;
const MAX_TUPLES: usize = 1 << 20;

/// The law `ν̄` of `θ_1 + … + θ_l` under the tilted product measure
/// `Π ν(dθ_i) γ(θ_1, …, θ_l) / G`.
#[derive(Clone, Debug, PartialEq)]
pub struct TiltedPrior<T: Real> {
    pub order: usize,
    pub log_normalizer: T,
    pub support: TiltedSupport<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TiltedSupport<T: Real> {
    Discrete {
        atoms: Vec<VecFn<T>>,
        weights: Vec<T>,
    },
    Gaussian {
        mean: DVector<T>,
        cov: DMatrix<T>,
    },
}

impl<T: Real> TiltedPrior<T> {
    /// `G = E Π_{i<j} exp(∫ θ_i^T Q θ_j dt)`.
    pub fn normalizer(&self) -> T {
        self.log_normalizer.exp()
    }

    /// Mean of `ν̄` at time `t`.
    pub fn mean_at(&self, t: T) -> DVector<T> {
        match &self.support {
            TiltedSupport::Discrete { atoms, weights } => atoms
                .iter()
                .zip(weights)
                .fold(DVector::zeros(atoms[0].dim()), |acc, (a, w)| {
                    acc + a.eval(t) * *w
                }),
            TiltedSupport::Gaussian { mean, .. } => mean.clone(),
        }
    }

    /// Replaces a Gaussian support by Gauss–Hermite atoms.
    pub fn discretized(&self, nodes: usize) -> Result<Self> {
        match &self.support {
            TiltedSupport::Discrete { .. } => Ok(self.clone()),
            TiltedSupport::Gaussian { mean, cov } => {
                let (points, weights) = gaussian_atoms(mean, cov, nodes)?;
                Ok(Self {
                    order: self.order,
                    log_normalizer: self.log_normalizer,
                    support: TiltedSupport::Discrete {
                        atoms: points.into_iter().map(VecFn::constant).collect(),
                        weights,
                    },
                })
            }
        }
    }

    /// Fresh equivalence filter `â_pow = l⁻¹ Ē{θ̄ | F°_t}`.
    pub fn filter(&self) -> Result<PowerFilter<T>> {
        let inner: Box<dyn DriftFilter<T>> = match &self.support {
            TiltedSupport::Discrete { atoms, weights } => Box::new(MixtureFilter::new(
                atoms.clone(),
                weights,
                DriftMap::Identity,
            )?),
            TiltedSupport::Gaussian { mean, cov } => Box::new(KalmanFilter::new(
                OuCoefficients::static_prior(mean.clone(), cov.clone()),
            )),
        };
        Ok(PowerFilter {
            inner,
            order: self.order,
            log_normalizer: self.log_normalizer,
        })
    }
}

/// Builds `ν̄` and `G` for order `l ≥ 2`. `q_path[k]` is `Q(t_k)` for the
/// left end of each grid step, so all time integrals are the same left-point
/// sums the likelihood uses.
pub fn build_tilted_prior<T: Real>(
    prior: &PriorSpec<T>,
    q_path: &[DMatrix<T>],
    grid: &TimeGrid<T>,
    order: usize,
) -> Result<TiltedPrior<T>> {
    if order < 2 {
        return Err(Error::InvalidSpec(format!(
            "power order must be at least 2, got {order}"
        )));
    }
    if q_path.len() < grid.steps() {
        return Err(Error::GridMismatch(format!(
            "{} Q matrices for {} steps",
            q_path.len(),
            grid.steps()
        )));
    }
    match prior {
        PriorSpec::Discrete(p) => discrete(&p.atoms, &p.probs, q_path, grid, order),
        PriorSpec::GaussianStatic(g) => {
            let dt = grid.dt();
            let h = q_path[..grid.steps()]
                .iter()
                .fold(DMatrix::zeros(g.mean.len(), g.mean.len()), |acc, q| {
                    acc + q * dt
                });
            gaussian(&g.mean, &g.cov, &h, order)
        }
        _ => Err(Error::Incompatible(
            "the tilted prior is available for discrete and static Gaussian priors".into(),
        )),
    }
}

fn discrete<T: Real>(
    atoms: &[VecFn<T>],
    probs: &[T],
    q_path: &[DMatrix<T>],
    grid: &TimeGrid<T>,
    order: usize,
) -> Result<TiltedPrior<T>> {
    let live: Vec<usize> = (0..atoms.len()).filter(|&i| probs[i] > T::zero()).collect();
    let d = live.len();
    let n = atoms[0].dim();
    let dt = grid.dt();

    // cross[a][b] = Σ_k θ_a(t_k)^T Q_k θ_b(t_k) dt
    let mut cross = vec![vec![T::zero(); d]; d];
    let mut values = vec![vec![T::zero(); n]; d];
    for (k, q) in q_path.iter().take(grid.steps()).enumerate() {
        let t = grid.time(k);
        for (slot, &i) in live.iter().enumerate() {
            atoms[i].eval_into(t, &mut values[slot]);
        }
        for a in 0..d {
            for b in a..d {
                let v = bilinear(&values[a], q, &values[b]) * dt;
                cross[a][b] += v;
                if a != b {
                    cross[b][a] += v;
                }
            }
        }
    }

    let mut count = 1usize;
    for j in 0..order {
        count = count.saturating_mul(d + j) / (j + 1);
    }
    if count > MAX_TUPLES {
        return Err(Error::InvalidSpec(format!(
            "{count} parameter tuples exceed the enumeration limit"
        )));
    }

    let log_factorial = |m: usize| (1..=m).fold(0.0f64, |acc, j| acc + (j as f64).ln());
    let mut support: Vec<VecFn<T>> = Vec::new();
    let mut log_w: Vec<T> = Vec::new();
    let mut tuple = vec![0usize; order];
    loop {
        let mut lw = log_factorial(order);
        let mut run = 1usize;
        for j in 1..=order {
            if j < order && tuple[j] == tuple[j - 1] {
                run += 1;
            } else {
                lw -= log_factorial(run);
                run = 1;
            }
        }
        let mut log_weight = lit::<T>(lw);
        let mut sum = VecFn::zero(n);
        for (i, &a) in tuple.iter().enumerate() {
            log_weight += probs[live[a]].ln();
            sum = sum.sum(&atoms[live[a]]);
            for &b in &tuple[i + 1..] {
                log_weight += cross[a][b];
            }
        }
        match support.iter().position(|s| same_fn(s, &sum)) {
            Some(j) => log_w[j] = log_sum_exp(&[log_w[j], log_weight]),
            None => {
                support.push(sum);
                log_w.push(log_weight);
            }
        }
        // next nondecreasing tuple
        let Some(pos) = (0..order).rev().find(|&j| tuple[j] + 1 < d) else {
            break;
        };
        let v = tuple[pos] + 1;
        tuple[pos..].iter_mut().for_each(|x| *x = v);
    }

    let log_g = log_sum_exp(&log_w);
    if !log_g.is_finite() {
        return Err(Error::InfiniteNormalizer {
            min_eigenvalue: f64::NAN,
        });
    }
    let weights = log_w.iter().map(|w| (*w - log_g).exp()).collect();
    Ok(TiltedPrior {
        order,
        log_normalizer: log_g,
        support: TiltedSupport::Discrete {
            atoms: support,
            weights,
        },
    })
}

fn same_fn<T: Real>(a: &VecFn<T>, b: &VecFn<T>) -> bool {
    let close = |x: &DVector<T>, y: &DVector<T>| {
        x.iter().zip(y.iter()).all(|(u, v)| {
            let (u, v) = (to_f64(*u), to_f64(*v));
            (u - v).abs() <= 1e-12 * (1.0 + u.abs().max(v.abs()))
        })
    };
    close(&a.level, &b.level) && close(&a.slope, &b.slope)
}

/// Precision-form Gaussian algebra: the joint precision of `(x_1, …, x_l)`
/// has `Γ⁻¹` on the diagonal blocks and `-H` off the diagonal.
fn gaussian<T: Real>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    h: &DMatrix<T>,
    order: usize,
) -> Result<TiltedPrior<T>> {
    let n = mean.len();
    let m = n * order;
    let cov_inv = spd_inverse(cov, "Gaussian prior covariance")?;
    let mut precision = DMatrix::zeros(m, m);
    for i in 0..order {
        for j in 0..order {
            let block = if i == j { cov_inv.clone() } else { -h.clone() };
            precision.view_mut((i * n, j * n), (n, n)).copy_from(&block);
        }
    }
    let precision = symmetrize(&precision);
    let min_eig = min_eigenvalue(&precision);
    if to_f64(min_eig) <= PRECISION_FLOOR {
        return Err(Error::InfiniteNormalizer {
            min_eigenvalue: to_f64(min_eig),
        });
    }
    let joint_cov = spd_inverse(&precision, "tilted precision")?;
    let shift = &cov_inv * mean;
    let b = DVector::from_iterator(m, (0..order).flat_map(|_| shift.iter().copied()));
    let joint_mean = &joint_cov * &b;

    let l = from_usize::<T>(order);
    let half = lit::<T>(0.5);
    let log_g = -half * spd_log_det(&precision, "tilted precision")?
        - half * l * spd_log_det(cov, "Gaussian prior covariance")?
        + half * b.dot(&joint_mean)
        - half * l * mean.dot(&shift);

    let mut sum_mean = DVector::zeros(n);
    let mut sum_cov = DMatrix::zeros(n, n);
    for i in 0..order {
        sum_mean += joint_mean.rows(i * n, n);
        for j in 0..order {
            sum_cov += joint_cov.view((i * n, j * n), (n, n));
        }
    }
    Ok(TiltedPrior {
        order,
        log_normalizer: log_g,
        support: TiltedSupport::Gaussian {
            mean: sum_mean,
            cov: symmetrize(&sum_cov),
        },
    })
}

/// `â_pow(t) = l⁻¹ Σ ν̄_j z_j θ̄_j(t) / Σ ν̄_j z_j`, with `state` the
/// likelihood of the tilted support atoms.
pub fn power_equivalence_filter<T: Real>(
    tilted: &TiltedPrior<T>,
    state: &LikelihoodState<T>,
    t: T,
) -> Result<DVector<T>> {
    let TiltedSupport::Discrete { atoms, .. } = &tilted.support else {
        return Err(Error::Incompatible(
            "discretize a Gaussian tilted prior before filtering".into(),
        ));
    };
    if atoms.len() != state.len() {
        return Err(Error::GridMismatch(format!(
            "{} atoms, {} likelihoods",
            atoms.len(),
            state.len()
        )));
    }
    let weights = state.posterior_weights();
    let mean = atoms
        .iter()
        .zip(&weights)
        .fold(DVector::zeros(atoms[0].dim()), |acc, (a, w)| {
            acc + a.eval(t) * *w
        });
    Ok(mean / from_usize::<T>(tilted.order))
}

/// Posterior mean under `ν̄`, scaled by `1/l`.
pub struct PowerFilter<T: Real> {
    inner: Box<dyn DriftFilter<T>>,
    order: usize,
    log_normalizer: T,
}

impl<T: Real> DriftFilter<T> for PowerFilter<T> {
    fn variant(&self) -> &'static str {
        "power"
    }

    fn t(&self) -> T {
        self.inner.t()
    }

    fn estimate_into(&mut self, current: &[T], out: &mut [T]) {
        self.inner.estimate_into(current, out);
        let l = from_usize::<T>(self.order);
        out.iter_mut().for_each(|o| *o /= l);
    }

    fn advance(&mut self, current: &[T], local: &LocalVol<T>, d_r: &[T], dt: T) -> Result<()> {
        self.inner.advance(current, local, d_r, dt)
    }

    fn state(&mut self, current: &[T]) -> FilterState<T> {
        let mut s = self.inner.state(current);
        s.estimate /= from_usize::<T>(self.order);
        s
    }

    /// `Z̄^l = G Σ ν̄_j z(θ̄_j)` holds exactly on the grid, so the tilted
    /// likelihood recovers `log Z̄`.
    fn log_density(&self) -> Option<T> {
        self.inner
            .log_density()
            .map(|inner| (inner + self.log_normalizer) / from_usize::<T>(self.order))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{DiscretePrior, GaussianPrior};
    use nalgebra::dvector;

    fn point(theta: f64) -> PriorSpec<f64> {
        PriorSpec::Discrete(DiscretePrior {
            atoms: vec![VecFn::constant(dvector![theta])],
            probs: vec![1.0],
        })
    }

    fn q_path(q: f64, steps: usize) -> Vec<DMatrix<f64>> {
        vec![DMatrix::from_element(1, 1, q); steps]
    }

    #[test]
    fn point_mass_doubles_the_atom() {
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let t = build_tilted_prior(&point(0.1), &q_path(25.0, 100), &grid, 2).unwrap();
        assert!((t.normalizer() - 0.25f64.exp()).abs() < 1e-12);
        let TiltedSupport::Discrete { atoms, weights } = &t.support else {
            panic!()
        };
        assert_eq!(atoms.len(), 1);
        assert!((atoms[0].level[0] - 0.2).abs() < 1e-15);
        assert!((weights[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_q_is_plain_convolution() {
        let prior = PriorSpec::Discrete(DiscretePrior {
            atoms: vec![
                VecFn::constant(dvector![0.0]),
                VecFn::constant(dvector![0.2]),
            ],
            probs: vec![0.25, 0.75],
        });
        let grid = TimeGrid::new(1.0, 0.25).unwrap();
        let t = build_tilted_prior(&prior, &q_path(0.0, 4), &grid, 2).unwrap();
        assert!((t.normalizer() - 1.0).abs() < 1e-15);
        let TiltedSupport::Discrete { atoms, weights } = &t.support else {
            panic!()
        };
        let expect = [(0.0, 0.0625), (0.2, 0.375), (0.4, 0.5625)];
        for (v, w) in expect {
            let j = atoms
                .iter()
                .position(|a| (a.level[0] - v).abs() < 1e-12)
                .unwrap();
            assert!((weights[j] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicate_sums_are_merged() {
        let prior = PriorSpec::Discrete(DiscretePrior {
            atoms: [-0.1, 0.0, 0.1]
                .iter()
                .map(|v| VecFn::constant(dvector![*v]))
                .collect(),
            probs: vec![1.0 / 3.0; 3],
        });
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let t = build_tilted_prior(&prior, &q_path(1.0, 2), &grid, 2).unwrap();
        let TiltedSupport::Discrete { atoms, weights } = &t.support else {
            panic!()
        };
        assert_eq!(atoms.len(), 5);
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn wide_gaussian_has_infinite_normalizer() {
        let prior = PriorSpec::GaussianStatic(GaussianPrior {
            mean: dvector![0.1],
            cov: DMatrix::from_element(1, 1, 0.09),
        });
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let err = build_tilted_prior(&prior, &q_path(25.0, 100), &grid, 2).unwrap_err();
        assert!(matches!(err, Error::InfiniteNormalizer { .. }));
        assert!(err.to_string().contains("G infinite"));
    }

    #[test]
    fn equivalence_filter_starts_at_scaled_mean() {
        let prior = PriorSpec::Discrete(DiscretePrior {
            atoms: vec![
                VecFn::constant(dvector![0.0]),
                VecFn::constant(dvector![0.2]),
            ],
            probs: vec![0.5, 0.5],
        });
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let t = build_tilted_prior(&prior, &q_path(25.0, 100), &grid, 2).unwrap();
        let TiltedSupport::Discrete { weights, .. } = &t.support else {
            panic!()
        };
        let st = LikelihoodState::new(weights).unwrap();
        let a = power_equivalence_filter(&t, &st, 0.0).unwrap();
        assert!((a[0] - t.mean_at(0.0)[0] / 2.0).abs() < 1e-15);
    }
}
