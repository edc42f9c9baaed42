use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{feynman_kac_gradient, feynman_kac_value, FkOptions, GridValue, MarkovEmbedding};
use crate::error::{Error, Result};
use crate::market::{MarketSpec, PathPrefix, SamplePath, TimeGrid, VolField};
use crate::scalar::{lit, Real};
use crate::strategies::{wealth_step, Utility, WealthTrace};

pub type Claim<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;

/// `C(y) = F(φ(y), λ̂)`.
pub fn terminal_claim<T: Real>(
    emb: &MarkovEmbedding<T>,
    utility: &Utility<T>,
    lambda: T,
) -> Claim<T> {
    let emb = emb.clone();
    let utility = utility.clone();
    Arc::new(move |y: &[T]| utility.claim(emb.terminal(y), lambda))
}

/// Resimulated Feynman–Kac value with common-random-number gradients.
#[derive(Clone)]
pub struct FkValue<T: Real> {
    pub embedding: MarkovEmbedding<T>,
    pub claim: Claim<T>,
    pub options: FkOptions,
}

#[derive(Clone)]
pub enum ValueFunction<T: Real> {
    Grid(GridValue<T>),
    MonteCarlo(FkValue<T>),
}

impl<T: Real> ValueFunction<T> {
    pub fn value(&self, y: &[T], t: T) -> Result<T> {
        match self {
            ValueFunction::Grid(g) => g.value(y, t),
            ValueFunction::MonteCarlo(fk) => {
                let e = feynman_kac_value(&fk.embedding, fk.claim.as_ref(), y, t, fk.options)?;
                Ok(lit(e.mean))
            }
        }
    }

    pub fn gradient(&self, y: &[T], t: T) -> Result<DVector<T>> {
        match self {
            ValueFunction::Grid(g) => g.gradient(y, t),
            ValueFunction::MonteCarlo(fk) => {
                let e = feynman_kac_gradient(&fk.embedding, fk.claim.as_ref(), y, t, fk.options)?;
                Ok(DVector::from_iterator(
                    e.len(),
                    e.iter().map(|g| lit(g.mean)),
                ))
            }
        }
    }
}

/// `π = B L(y,t)^T ∂V/∂y`.
pub fn extract_strategy<T: Real>(
    emb: &MarkovEmbedding<T>,
    value: &ValueFunction<T>,
    y: &[T],
    t: T,
    b: T,
) -> Result<DVector<T>> {
    let local = emb.local_vol(y, t)?;
    let grad = value.gradient(y, t)?;
    let mut l = DMatrix::zeros(emb.dim, emb.n);
    emb.loading_into(y, t, &local, &mut l);
    Ok(l.transpose() * grad * b)
}

/// Trades `π` from the value function along `path` while carrying the
/// embedded state. The trace's `log_zbar` is `ln φ(y(T))`; `claim` is left
/// for the caller.
#[allow(clippy::too_many_arguments)]
pub fn replicate<T: Real>(
    spec: &MarketSpec<T>,
    grid: &TimeGrid<T>,
    vol: &VolField<T>,
    emb: &MarkovEmbedding<T>,
    value: &ValueFunction<T>,
    path: &SamplePath<T>,
    record: bool,
) -> Result<WealthTrace<T>> {
    let n = spec.n_stocks;
    if emb.n != n || path.steps() != grid.steps() {
        return Err(Error::GridMismatch(
            "embedding, path and grid disagree".into(),
        ));
    }
    let dt = grid.dt();
    let x0 = spec.initial_wealth;
    let mut y: Vec<T> = emb.y0.iter().copied().collect();
    let mut x_tilde = x0;
    let mut log_b = T::zero();
    let mut min_excess = T::zero();
    let mut d_r = vec![T::zero(); n];
    let mut pi_rec = Vec::new();
    let mut wealth = Vec::new();
    let mut normalized = Vec::new();
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let local = vol.at(path.index, k, t, PathPrefix::new(n, path.excess_prefix(k)))?;
        let b = log_b.exp();
        let pi = extract_strategy(emb, value, &y, t, b)?;
        if record {
            pi_rec.extend_from_slice(pi.as_slice());
            wealth.push(b * x_tilde);
            normalized.push(x_tilde);
        }
        path.increment_into(k, &mut d_r);
        x_tilde = wealth_step(x_tilde, pi.as_slice(), b, &d_r);
        if x_tilde - x0 < min_excess {
            min_excess = x_tilde - x0;
        }
        emb.advance(&mut y, t, &local, &d_r, dt);
        log_b += path.rates[k] * dt;
    }
    let discount = log_b.exp();
    if record {
        wealth.push(discount * x_tilde);
        normalized.push(x_tilde);
    }
    Ok(WealthTrace {
        path: path.index,
        pi: pi_rec,
        wealth,
        normalized,
        estimates: Vec::new(),
        terminal: x_tilde,
        discount,
        information: T::zero(),
        log_zbar: Some(emb.terminal(&y).ln()),
        min_excess,
        claim: None,
    })
}
