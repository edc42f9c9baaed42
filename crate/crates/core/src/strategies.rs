//! Utilities and their optimal claims, the multiplier `λ̂`, self-financing
//! wealth, and the explicit log / power strategies.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filters::{DriftFilter, TiltedPrior};
use crate::linalg::{bilinear, mat_vec_into};
use crate::market::fmt;
use crate::market::{MarketSpec, PathPrefix, SamplePath, TimeGrid, VolField};
use crate::scalar::{from_usize, lit, to_f64, Real};

/// User-supplied `F(z, λ)` (the maximiser of `z U(x) - λ x` over `D̃`) and `U`.
#[derive(Clone)]
pub struct GenericUtility<T: Real> {
    pub claim: Arc<dyn Fn(T, T) -> T + Send + Sync>,
    pub utility: Arc<dyn Fn(T) -> T + Send + Sync>,
    /// `D̃ = [lower, ∞)`.
    pub lower: T,
}

impl<T: Real> fmt::Debug for GenericUtility<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericUtility")
            .field("lower", &self.lower)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub enum Utility<T: Real> {
    /// `U(x) = ln(x + δ)`.
    Log {
        delta: T,
    },
    /// `U(x) = x^{δ_u} / δ_u` with `δ_u = (l - 1) / l`.
    Power {
        order: usize,
    },
    Generic(GenericUtility<T>),
}

impl<T: Real> Utility<T> {
    /// `F(z, λ)`.
    pub fn claim(&self, z: T, lambda: T) -> T {
        match self {
            Utility::Log { delta } => z / lambda - *delta,
            Utility::Power { order } => (z / lambda).powi(*order as i32),
            Utility::Generic(g) => (g.claim)(z, lambda),
        }
    }

    pub fn utility(&self, x: T) -> T {
        match self {
            Utility::Log { delta } => (x + *delta).ln(),
            Utility::Power { .. } => {
                let du = self.exponent();
                x.powf(du) / du
            }
            Utility::Generic(g) => (g.utility)(x),
        }
    }

    /// Power exponent `δ_u` (one for the other variants).
    pub fn exponent(&self) -> T {
        match self {
            Utility::Power { order } => from_usize::<T>(order - 1) / from_usize::<T>(*order),
            _ => T::one(),
        }
    }

    /// Infimum of the claim range.
    pub fn lower(&self) -> T {
        match self {
            Utility::Log { delta } => -*delta,
            Utility::Power { .. } => T::zero(),
            Utility::Generic(g) => g.lower,
        }
    }

    pub fn delta(&self) -> T {
        match self {
            Utility::Log { delta } => *delta,
            _ => T::zero(),
        }
    }
}

/// `X̃' = X̃ + B⁻¹ π^T ΔR̃`.
#[inline]
pub fn wealth_step<T: Real>(x_tilde: T, pi: &[T], b: T, d_r: &[T]) -> T {
    x_tilde
        + pi.iter()
            .zip(d_r)
            .fold(T::zero(), |acc, (p, d)| acc + *p * *d)
            / b
}

/// `π = (X + δB) Q â`.
pub fn log_strategy<T: Real>(x: T, b: T, a_hat: &[T], q: &DMatrix<T>, delta: T) -> DVector<T> {
    myopic_strategy(x, b, a_hat, q, delta, T::one())
}

/// Certainty-equivalence wrapper: the log strategy for a drift estimate,
/// scaled by `scale`.
pub fn myopic_strategy<T: Real>(
    x: T,
    b: T,
    a_hat: &[T],
    q: &DMatrix<T>,
    delta: T,
    scale: T,
) -> DVector<T> {
    let mut out = DVector::zeros(a_hat.len());
    mat_vec_into(q, a_hat, out.as_mut_slice());
    out * ((x + delta * b) * scale)
}

/// `π = l X Q â_pow`.
pub fn power_strategy<T: Real>(
    x: T,
    a_pow: &[T],
    q: &DMatrix<T>,
    order: usize,
    tilted: Option<&TiltedPrior<T>>,
) -> Result<DVector<T>> {
    let tilted = tilted.ok_or(Error::MissingTiltedPrior)?;
    if tilted.order != order {
        return Err(Error::Incompatible(format!(
            "tilted prior of order {} used with l = {order}",
            tilted.order
        )));
    }
    Ok(myopic_strategy(
        x,
        T::one(),
        a_pow,
        q,
        T::zero(),
        from_usize::<T>(order),
    ))
}

/// `λ̂` from `E_* F(Z̄, λ̂) = X₀`.
///
/// Log and power use their closed forms; `moment` supplies `E_* Z̄^l` (the
/// normaliser `G`) when known, otherwise it is estimated from the samples.
/// Generic utilities are solved by bisection on `log λ`, assuming the MC mean
/// of `F` decreases in `λ`.
pub fn solve_lambda<T: Real>(
    utility: &Utility<T>,
    zbar_samples: &[T],
    x0: T,
    moment: Option<T>,
) -> Result<T> {
    if !(x0 > T::zero()) {
        return Err(Error::InvalidSpec("X0 must be positive".into()));
    }
    match utility {
        Utility::Log { delta } => Ok(T::one() / (x0 + *delta)),
        Utility::Power { order } => {
            let m = match moment {
                Some(g) => g,
                None => {
                    if zbar_samples.is_empty() {
                        return Err(Error::InvalidSpec("no samples to estimate E*Zbar^l".into()));
                    }
                    let sum = zbar_samples
                        .iter()
                        .fold(T::zero(), |acc, z| acc + z.powi(*order as i32));
                    sum / from_usize::<T>(zbar_samples.len())
                }
            };
            let inv = T::one() / from_usize::<T>(*order);
            Ok(x0.powf(-inv) * m.powf(inv))
        }
        Utility::Generic(_) => bisect_lambda(utility, zbar_samples, x0),
    }
}

fn bisect_lambda<T: Real>(utility: &Utility<T>, samples: &[T], x0: T) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::InvalidSpec(
            "no samples for the budget equation".into(),
        ));
    }
    let x0f = to_f64(x0);
    let gap = |log_lambda: f64| {
        let lambda: T = lit(log_lambda.exp());
        let total = samples
            .iter()
            .fold(0.0, |acc, z| acc + to_f64(utility.claim(*z, lambda)));
        total / samples.len() as f64 - x0f
    };
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    let mut tries = 0;
    while gap(lo) < 0.0 {
        lo -= 1.0;
        tries += 1;
        if tries > 200 {
            return Err(Error::Bracket(
                "budget stays below X0 as lambda decreases".into(),
            ));
        }
    }
    tries = 0;
    while gap(hi) > 0.0 {
        hi += 1.0;
        tries += 1;
        if tries > 200 {
            return Err(Error::Bracket(
                "budget stays above X0 as lambda increases".into(),
            ));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g = gap(mid);
        if g.abs() < 1e-13 * x0f.max(1.0) || hi - lo < 1e-15 {
            return Ok(lit(mid.exp()));
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lit((0.5 * (lo + hi)).exp()))
}

/// `ξ̂ = F(Z̄(T), λ̂)`, rejected when it leaves the claim range.
pub fn optimal_claim<T: Real>(utility: &Utility<T>, lambda: T, zbar: T) -> Result<T> {
    let xi = utility.claim(zbar, lambda);
    if !xi.is_finite() || xi < utility.lower() {
        return Err(Error::ClaimOutsideDomain { value: to_f64(xi) });
    }
    Ok(xi)
}

/// `[z U(x) - λ x] - [z U(F) - λ F]`; positive values violate the defining
/// maximisation of `F`.
pub fn condition_gap<T: Real>(utility: &Utility<T>, lambda: T, z: T, x: T) -> T {
    let f = utility.claim(z, lambda);
    (z * utility.utility(x) - lambda * x) - (z * utility.utility(f) - lambda * f)
}

/// Trading rule fed by a drift estimate.
#[derive(Clone, Debug, PartialEq)]
pub enum StrategyRule<T: Real> {
    Zero,
    /// Log-optimal with the filter's estimate.
    Log {
        delta: T,
    },
    /// `π = l X Q â` with the power equivalence filter's estimate.
    Power {
        order: usize,
    },
    /// The log formula with the filter's estimate, scaled.
    Myopic {
        delta: T,
        scale: T,
    },
    /// The log formula with a constant drift guess.
    Frozen {
        delta: T,
        estimate: DVector<T>,
    },
    /// The log formula with the realised drift (P paths only), scaled.
    TrueDrift {
        delta: T,
        scale: T,
    },
}

impl<T: Real> StrategyRule<T> {
    pub fn needs_filter(&self) -> bool {
        matches!(
            self,
            StrategyRule::Log { .. } | StrategyRule::Power { .. } | StrategyRule::Myopic { .. }
        )
    }
}

/// Wealth along one path.
#[derive(Clone, Debug, PartialEq)]
pub struct WealthTrace<T: Real> {
    pub path: usize,
    /// `π(t_k)` for `k < K`, flattened; empty unless recorded.
    pub pi: Vec<T>,
    /// Currency wealth `X(t_k)`; empty unless recorded.
    pub wealth: Vec<T>,
    /// `X̃(t_k)`; empty unless recorded.
    pub normalized: Vec<T>,
    /// `â(t_k)` used by the rule, flattened; empty unless recorded.
    pub estimates: Vec<T>,
    pub terminal: T,
    /// `B(T)`.
    pub discount: T,
    /// `∫ â^T Q â dt` of the filter estimate.
    pub information: T,
    /// `log Z̄(T)` when the filter carries it.
    pub log_zbar: Option<T>,
    /// `min_t X̃(t) - X₀`.
    pub min_excess: T,
    pub claim: Option<T>,
}

impl<T: Real> WealthTrace<T> {
    pub fn replication_error(&self) -> Option<T> {
        self.claim.map(|c| (self.terminal - c).abs())
    }

    /// Whether the admissibility floor `X̃ - X₀ ≥ -floor` was breached.
    pub fn breached(&self, floor: T) -> bool {
        self.min_excess < -floor
    }
}

/// Runs `rule` along `path`, stepping `filter` (if any) with the same
/// increments. Left-point `π`, self-financing update of `X̃`.
#[allow(clippy::too_many_arguments)]
pub fn trade<T: Real>(
    spec: &MarketSpec<T>,
    grid: &TimeGrid<T>,
    vol: &VolField<T>,
    path: &SamplePath<T>,
    mut filter: Option<&mut dyn DriftFilter<T>>,
    rule: &StrategyRule<T>,
    tilted: Option<&TiltedPrior<T>>,
    record: bool,
) -> Result<WealthTrace<T>> {
    let n = spec.n_stocks;
    let steps = grid.steps();
    if path.steps() != steps || path.n != n {
        return Err(Error::GridMismatch("path does not match the grid".into()));
    }
    if rule.needs_filter() && filter.is_none() {
        return Err(Error::Incompatible("strategy needs a drift filter".into()));
    }
    let dt = grid.dt();
    let x0 = spec.initial_wealth;
    let mut x_tilde = x0;
    let mut log_b = T::zero();
    let mut information = T::zero();
    let mut min_excess = T::zero();
    let mut a_hat = vec![T::zero(); n];
    let mut d_r = vec![T::zero(); n];

    let cap = if record { steps + 1 } else { 0 };
    let mut pi_rec = Vec::with_capacity(cap * n);
    let mut wealth = Vec::with_capacity(cap);
    let mut normalized = Vec::with_capacity(cap);
    let mut estimates = Vec::with_capacity(cap * n);

    for k in 0..steps {
        let t = grid.time(k);
        let current = path.excess_at(k);
        let local = vol.at(path.index, k, t, PathPrefix::new(n, path.excess_prefix(k)))?;
        let b = log_b.exp();
        let x = b * x_tilde;
        if let Some(f) = filter.as_deref_mut() {
            f.estimate_into(current, &mut a_hat);
            information += bilinear(&a_hat, &local.q, &a_hat) * dt;
        }
        let pi = match rule {
            StrategyRule::Zero => DVector::zeros(n),
            StrategyRule::Log { delta } => log_strategy(x, b, &a_hat, &local.q, *delta),
            StrategyRule::Power { order } => power_strategy(x, &a_hat, &local.q, *order, tilted)?,
            StrategyRule::Myopic { delta, scale } => {
                myopic_strategy(x, b, &a_hat, &local.q, *delta, *scale)
            }
            StrategyRule::Frozen { delta, estimate } => {
                log_strategy(x, b, estimate.as_slice(), &local.q, *delta)
            }
            StrategyRule::TrueDrift { delta, scale } => {
                let drift = path.drift_at(k).ok_or_else(|| {
                    Error::Incompatible("true-drift strategy needs P paths".into())
                })?;
                myopic_strategy(x, b, drift, &local.q, *delta, *scale)
            }
        };
        if record {
            pi_rec.extend_from_slice(pi.as_slice());
            wealth.push(x);
            normalized.push(x_tilde);
            estimates.extend_from_slice(&a_hat);
        }
        path.increment_into(k, &mut d_r);
        x_tilde = wealth_step(x_tilde, pi.as_slice(), b, &d_r);
        if x_tilde - x0 < min_excess {
            min_excess = x_tilde - x0;
        }
        if let Some(f) = filter.as_deref_mut() {
            f.advance(current, &local, &d_r, dt)?;
        }
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
        estimates,
        terminal: x_tilde,
        discount,
        information,
        log_zbar: filter.and_then(|f| f.log_density()),
        min_excess,
        claim: None,
    })
}

/// CSV with columns `path,t,pi_1..pi_n,X,X_tilde`; `π` is blank at `T`.
pub fn write_wealth_csv<T: Real, W: Write>(
    traces: &[WealthTrace<T>],
    grid: &TimeGrid<T>,
    n: usize,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("pi_{i}")));
    header.extend(["X".to_string(), "X_tilde".to_string()]);
    w.write_record(&header)?;
    for tr in traces {
        if tr.normalized.is_empty() {
            continue;
        }
        for k in 0..=grid.steps() {
            let mut row = vec![tr.path.to_string(), fmt(grid.time(k))];
            for i in 0..n {
                row.push(if k < grid.steps() {
                    fmt(tr.pi[k * n + i])
                } else {
                    String::new()
                });
            }
            row.push(fmt(tr.wealth[k]));
            row.push(fmt(tr.normalized[k]));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
