use nalgebra::DVector;

use super::{DriftFilter, FilterState, Posterior};
use crate::error::{Error, Result};
use crate::likelihood::LikelihoodState;
use crate::market::{DriftMap, LocalVol, PriorSpec};
use crate::quadrature::gaussian_atoms;
use crate::scalar::Real;
use crate::timefn::VecFn;

/// `â = Σ w_i z_i A_i / Σ w_i z_i` for drifts `A_i = A(t, θ_i, R̃)` already
/// evaluated at the state's time.
pub fn mixture_posterior_mean<T: Real>(
    state: &LikelihoodState<T>,
    drifts: &[DVector<T>],
) -> DVector<T> {
    let weights = state.posterior_weights();
    let n = drifts.first().map_or(0, |d| d.len());
    drifts
        .iter()
        .zip(&weights)
        .fold(DVector::zeros(n), |acc, (a, w)| acc + a * *w)
}

/// Bayes filter over a finite support.
#[derive(Clone, Debug)]
pub struct MixtureFilter<T: Real> {
    atoms: Vec<VecFn<T>>,
    drift_map: DriftMap<T>,
    likelihood: LikelihoodState<T>,
    drifts: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> MixtureFilter<T> {
    pub fn new(atoms: Vec<VecFn<T>>, weights: &[T], drift_map: DriftMap<T>) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::InvalidSpec(
                "atoms and weights differ in length".into(),
            ));
        }
        let n = atoms.first().map_or(0, |a| a.dim());
        if atoms.iter().any(|a| a.dim() != n) {
            return Err(Error::InvalidSpec("atoms of different dimension".into()));
        }
        Ok(Self {
            likelihood: LikelihoodState::new(weights)?,
            drifts: vec![T::zero(); atoms.len() * n],
            weights: vec![T::zero(); atoms.len()],
            atoms,
            drift_map,
        })
    }

    /// Discrete priors use their atoms; static Gaussian priors a tensor
    /// Gauss–Hermite rule with `nodes` points per dimension.
    pub fn from_prior(prior: &PriorSpec<T>, drift_map: DriftMap<T>, nodes: usize) -> Result<Self> {
        match prior {
            PriorSpec::Discrete(p) => Self::new(p.atoms.clone(), &p.probs, drift_map),
            PriorSpec::GaussianStatic(g) => {
                let (points, w) = gaussian_atoms(&g.mean, &g.cov, nodes)?;
                Self::new(
                    points.into_iter().map(VecFn::constant).collect(),
                    &w,
                    drift_map,
                )
            }
            _ => Err(Error::Incompatible(
                "mixture filter needs a discrete or static Gaussian prior".into(),
            )),
        }
    }

    pub fn likelihood(&self) -> &LikelihoodState<T> {
        &self.likelihood
    }

    pub fn atoms(&self) -> &[VecFn<T>] {
        &self.atoms
    }

    fn fill_drifts(&mut self, current: &[T]) {
        let n = current.len();
        let t = self.likelihood.t();
        for (i, atom) in self.atoms.iter().enumerate() {
            let slot = &mut self.drifts[i * n..(i + 1) * n];
            atom.eval_into(t, slot);
            self.drift_map.apply_in_place(current, slot);
        }
    }
}

impl<T: Real> DriftFilter<T> for MixtureFilter<T> {
    fn variant(&self) -> &'static str {
        "mixture"
    }

    fn t(&self) -> T {
        self.likelihood.t()
    }

    fn estimate_into(&mut self, current: &[T], out: &mut [T]) {
        let n = current.len();
        self.fill_drifts(current);
        self.likelihood.posterior_weights_into(&mut self.weights);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (i, w) in self.weights.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&self.drifts[i * n..(i + 1) * n]) {
                *o += *w * *a;
            }
        }
    }

    fn advance(&mut self, current: &[T], local: &LocalVol<T>, d_r: &[T], dt: T) -> Result<()> {
        self.fill_drifts(current);
        self.likelihood.advance(&self.drifts, &local.q, d_r, dt);
        Ok(())
    }

    fn state(&mut self, current: &[T]) -> FilterState<T> {
        let estimate = self.estimate(current);
        FilterState {
            t: self.likelihood.t(),
            estimate,
            posterior: Posterior::Mixture {
                weights: self.weights.clone(),
            },
        }
    }

    fn log_density(&self) -> Option<T> {
        Some(self.likelihood.log_mixture_density())
    }
}
