use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, spd_inverse, symmetrize};
use crate::scalar::{lit, to_f64, Real};
use crate::timefn::{MatFn, VecFn};

const PROB_TOLERANCE: f64 = 1e-12;

/// Finite support: `P(Θ = θ_i) = p_i`, each `θ_i` a vector function of time.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePrior<T: Real> {
    pub atoms: Vec<VecFn<T>>,
    pub probs: Vec<T>,
}

/// Time-constant drift `Θ ~ N(mean, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

/// Linear drift dynamics
/// `da = α(t)(δ(t) - a) dt + b(t) dR + β(t) dW`, `a(0) ~ N(m0, γ0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OuCoefficients<T: Real> {
    pub alpha: MatFn<T>,
    pub beta: MatFn<T>,
    pub loading: MatFn<T>,
    pub target: VecFn<T>,
    pub mean0: DVector<T>,
    pub cov0: DMatrix<T>,
}

impl<T: Real> OuCoefficients<T> {
    /// A time-constant Gaussian drift written as degenerate linear dynamics.
    pub fn static_prior(mean: DVector<T>, cov: DMatrix<T>) -> Self {
        let n = mean.len();
        Self {
            alpha: MatFn::zeros(n, n),
            beta: MatFn::zeros(n, n),
            loading: MatFn::zeros(n, n),
            target: VecFn::zero(n),
            mean0: mean,
            cov0: cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean0.len()
    }

    pub fn is_static(&self) -> bool {
        self.alpha.is_zero() && self.beta.is_zero() && self.loading.is_zero()
    }
}

/// Finite-state chain `θ(t)` with generator rows indexed by the source state:
/// `l[k][i]` is the jump intensity from state k to state i, rows sum to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec<T: Real> {
    pub values: Vec<DVector<T>>,
    pub generator: MatFn<T>,
    pub initial: Vec<T>,
}

impl<T: Real> ChainSpec<T> {
    pub fn states(&self) -> usize {
        self.values.len()
    }

    /// Forward equation `dy_i/dt = Σ_k l_ki(t) y_k` over `[t, t + dt]`, one RK4 step.
    pub fn propagate(&self, t: T, dt: T, probs: &[T]) -> Vec<T> {
        let d = self.states();
        let rhs = |s: T, y: &[T]| -> Vec<T> {
            let g = self.generator.eval(s);
            (0..d)
                .map(|i| (0..d).fold(T::zero(), |acc, k| acc + g[(k, i)] * y[k]))
                .collect()
        };
        let half = lit::<T>(0.5);
        let axpy = |y: &[T], k: &[T], h: T| -> Vec<T> {
            y.iter().zip(k).map(|(a, b)| *a + *b * h).collect()
        };
        let k1 = rhs(t, probs);
        let k2 = rhs(t + dt * half, &axpy(probs, &k1, dt * half));
        let k3 = rhs(t + dt * half, &axpy(probs, &k2, dt * half));
        let k4 = rhs(t + dt, &axpy(probs, &k3, dt));
        let sixth = dt / lit(6.0);
        (0..d)
            .map(|i| probs[i] + sixth * (k1[i] + (k2[i] + k3[i]) * lit(2.0) + k4[i]))
            .collect()
    }

    /// Upper bound on the total jump intensity out of any state over `[0, T]`.
    /// The generator is affine in t, so the endpoints suffice.
    pub fn rate_bound(&self, horizon: T) -> f64 {
        let d = self.states();
        [T::zero(), horizon]
            .iter()
            .flat_map(|&t| {
                let g = self.generator.eval(t);
                (0..d).map(move |i| to_f64(-g[(i, i)]))
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorSpec<T: Real> {
    Discrete(DiscretePrior<T>),
    GaussianStatic(GaussianPrior<T>),
    OrnsteinUhlenbeck(OuCoefficients<T>),
    MarkovChain(ChainSpec<T>),
}

/// Realised parameter for one path.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamDraw<T: Real> {
    Atom(usize),
    Vector(DVector<T>),
    Chain(ChainPath),
    /// Initial value of the linear drift process.
    Ou(DVector<T>),
}

/// Piecewise-constant chain trajectory in continuous time.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainPath {
    /// `states[0]` at t = 0, `states[i + 1]` from `jump_times[i]` on.
    pub states: Vec<usize>,
    pub jump_times: Vec<f64>,
}

impl ChainPath {
    pub fn state_at(&self, t: f64) -> usize {
        let jumps = self.jump_times.partition_point(|&s| s <= t);
        self.states[jumps]
    }
}

fn check_probabilities<T: Real>(probs: &[T], what: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidSpec(format!("{what}: empty support")));
    }
    if probs.iter().any(|p| !(*p >= T::zero())) {
        return Err(Error::InvalidSpec(format!("{what}: negative probability")));
    }
    let total = probs.iter().fold(0.0, |a, p| a + to_f64(*p));
    let tolerance = PROB_TOLERANCE.max(16.0 * to_f64(T::default_epsilon()));
    if (total - 1.0).abs() > tolerance {
        return Err(Error::InvalidSpec(format!(
            "{what}: probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

fn check_psd<T: Real>(m: &DMatrix<T>, n: usize, what: &str) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::InvalidSpec(format!("{what}: expected {n}x{n}")));
    }
    let asym = (m - m.transpose()).amax();
    if to_f64(asym) > 1e-12 * (1.0 + to_f64(m.amax())) {
        return Err(Error::InvalidSpec(format!("{what}: not symmetric")));
    }
    if to_f64(min_eigenvalue(m)) < -1e-12 {
        return Err(Error::InvalidSpec(format!(
            "{what}: not positive semidefinite"
        )));
    }
    Ok(())
}

impl<T: Real> PriorSpec<T> {
    pub fn validate(&self, n: usize, horizon: T) -> Result<()> {
        match self {
            PriorSpec::Discrete(p) => {
                if p.atoms.len() != p.probs.len() {
                    return Err(Error::InvalidSpec(
                        "one probability per atom required".into(),
                    ));
                }
                if p.atoms.iter().any(|a| a.dim() != n) {
                    return Err(Error::InvalidSpec(
                        "atom dimension must equal n_stocks".into(),
                    ));
                }
                check_probabilities(&p.probs, "discrete prior")
            }
            PriorSpec::GaussianStatic(g) => {
                if g.mean.len() != n {
                    return Err(Error::InvalidSpec(
                        "prior mean dimension must equal n_stocks".into(),
                    ));
                }
                check_psd(&g.cov, n, "prior covariance")
            }
            PriorSpec::OrnsteinUhlenbeck(ou) => {
                if ou.dim() != n
                    || ou.alpha.shape() != (n, n)
                    || ou.beta.shape() != (n, n)
                    || ou.loading.shape() != (n, n)
                    || ou.target.dim() != n
                {
                    return Err(Error::InvalidSpec(
                        "OU coefficients must be n x n / n".into(),
                    ));
                }
                check_psd(&ou.cov0, n, "initial drift covariance")?;
                // β is affine in t; check invertibility at both ends.
                for t in [T::zero(), horizon] {
                    let beta = ou.beta.eval(t);
                    let bbt = &beta * beta.transpose();
                    if spd_inverse(&bbt, "beta beta^T").is_err() {
                        return Err(Error::InvalidSpec(format!(
                            "OU beta(t) must be invertible (fails at t = {})",
                            to_f64(t)
                        )));
                    }
                }
                Ok(())
            }
            PriorSpec::MarkovChain(c) => {
                let d = c.states();
                if d < 1 || c.initial.len() != d || c.generator.shape() != (d, d) {
                    return Err(Error::InvalidSpec("chain dimensions inconsistent".into()));
                }
                if c.values.iter().any(|v| v.len() != n) {
                    return Err(Error::InvalidSpec("chain values must be n-vectors".into()));
                }
                check_probabilities(&c.initial, "chain initial distribution")?;
                for t in [T::zero(), horizon] {
                    let g = c.generator.eval(t);
                    for i in 0..d {
                        let mut row = T::zero();
                        for j in 0..d {
                            row += g[(i, j)];
                            if i != j && g[(i, j)] < T::zero() {
                                return Err(Error::InvalidSpec(
                                    "negative off-diagonal intensity".into(),
                                ));
                            }
                        }
                        if to_f64(row.abs()) > 1e-10 * (1.0 + to_f64(g.amax())) {
                            return Err(Error::InvalidSpec(
                                "generator rows must sum to zero".into(),
                            ));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Mean of the drift at time 0 before any observation.
    pub fn initial_mean(&self, n: usize) -> DVector<T> {
        match self {
            PriorSpec::Discrete(p) => p
                .atoms
                .iter()
                .zip(&p.probs)
                .fold(DVector::zeros(n), |acc, (a, w)| {
                    acc + a.eval(T::zero()) * *w
                }),
            PriorSpec::GaussianStatic(g) => g.mean.clone(),
            PriorSpec::OrnsteinUhlenbeck(ou) => ou.mean0.clone(),
            PriorSpec::MarkovChain(c) => c
                .values
                .iter()
                .zip(&c.initial)
                .fold(DVector::zeros(n), |acc, (v, w)| acc + v * *w),
        }
    }

    /// Draws the parameter for one path; θ is drawn once at t = 0.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, horizon: T) -> ParamDraw<T> {
        match self {
            PriorSpec::Discrete(p) => ParamDraw::Atom(categorical(&p.probs, rng)),
            PriorSpec::GaussianStatic(g) => ParamDraw::Vector(gaussian(&g.mean, &g.cov, rng)),
            PriorSpec::OrnsteinUhlenbeck(ou) => ParamDraw::Ou(gaussian(&ou.mean0, &ou.cov0, rng)),
            PriorSpec::MarkovChain(c) => ParamDraw::Chain(sample_chain(c, horizon, rng)),
        }
    }
}

fn categorical<T: Real, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += to_f64(*p);
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    probs
        .iter()
        .rposition(|p| *p > T::zero())
        .unwrap_or(probs.len() - 1)
}

fn gaussian<T: Real, R: Rng + ?Sized>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    rng: &mut R,
) -> DVector<T> {
    let n = mean.len();
    let z = DVector::from_fn(n, |_, _| T::standard_normal(rng));
    if cov.iter().all(|v| *v == T::zero()) {
        return mean.clone();
    }
    let factor = match Cholesky::new(symmetrize(cov)) {
        Some(c) => c.l(),
        // PSD but singular: fall back to a symmetric square root.
        None => {
            let eig = nalgebra::SymmetricEigen::new(symmetrize(cov));
            let root = eig.eigenvalues.map(|v| v.max(T::zero()).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&root)
        }
    };
    mean + factor * z
}

/// Exact chain sampling by thinning a Poisson clock at the rate bound.
fn sample_chain<T: Real, R: Rng + ?Sized>(
    chain: &ChainSpec<T>,
    horizon: T,
    rng: &mut R,
) -> ChainPath {
    let d = chain.states();
    let mut states = vec![categorical(&chain.initial, rng)];
    let mut jump_times = Vec::new();
    let bound = chain.rate_bound(horizon);
    let end = to_f64(horizon);
    if bound <= 0.0 {
        return ChainPath { states, jump_times };
    }
    let mut t = 0.0;
    loop {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / bound;
        if t > end {
            break;
        }
        let current = *states.last().expect("non-empty");
        let g = chain.generator.eval(lit(t));
        let exit = to_f64(-g[(current, current)]);
        let accept: f64 = rng.random();
        if accept * bound >= exit {
            continue;
        }
        let pick: f64 = rng.random::<f64>() * exit;
        let mut acc = 0.0;
        let mut next = current;
        for j in (0..d).filter(|&j| j != current) {
            acc += to_f64(g[(current, j)]);
            next = j;
            if pick < acc {
                break;
            }
        }
        states.push(next);
        jump_times.push(t);
    }
    ChainPath { states, jump_times }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state(rate01: f64, rate10: f64) -> ChainSpec<f64> {
        ChainSpec {
            values: vec![DVector::from_element(1, 0.0), DVector::from_element(1, 0.2)],
            generator: MatFn::constant(DMatrix::from_row_slice(
                2,
                2,
                &[-rate01, rate01, rate10, -rate10],
            )),
            initial: vec![0.5, 0.5],
        }
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let p = PriorSpec::Discrete(DiscretePrior {
            atoms: vec![VecFn::zero(1), VecFn::zero(1)],
            probs: vec![0.5, 0.6],
        });
        assert!(p.validate(1, 1.0).is_err());
        let p = PriorSpec::Discrete(DiscretePrior {
            atoms: vec![VecFn::zero(1)],
            probs: vec![1.0],
        });
        assert!(p.validate(1, 1.0).is_ok());
    }

    #[test]
    fn generator_rows_must_sum_to_zero() {
        let mut c = two_state(1.0, 2.0);
        assert!(PriorSpec::MarkovChain(c.clone()).validate(1, 1.0).is_ok());
        c.generator = MatFn::constant(DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 2.0, -2.0]));
        assert!(PriorSpec::MarkovChain(c).validate(1, 1.0).is_err());
    }

    #[test]
    fn ou_requires_invertible_beta() {
        let ou = OuCoefficients::static_prior(
            DVector::from_element(1, 0.1),
            DMatrix::from_element(1, 1, 0.01),
        );
        assert!(PriorSpec::OrnsteinUhlenbeck(ou.clone())
            .validate(1, 1.0)
            .is_err());
        let ou = OuCoefficients {
            beta: MatFn::constant(DMatrix::from_element(1, 1, 0.1)),
            ..ou
        };
        assert!(PriorSpec::OrnsteinUhlenbeck(ou).validate(1, 1.0).is_ok());
    }

    #[test]
    fn gaussian_prior_must_be_psd() {
        let g = PriorSpec::GaussianStatic(GaussianPrior {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        });
        assert!(g.validate(2, 1.0).is_err());
    }

    #[test]
    fn chain_occupation_matches_stationary_law() {
        // Symmetric rates 2 -> long-run occupation 1/2 each, mean number of jumps 2T.
        let c = two_state(2.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let mut jumps = 0usize;
        let mut in_one = 0usize;
        for _ in 0..n {
            let path = sample_chain(&c, 1.0, &mut rng);
            jumps += path.jump_times.len();
            in_one += path.state_at(1.0);
        }
        let mean_jumps = jumps as f64 / n as f64;
        assert!((mean_jumps - 2.0).abs() < 0.05, "mean jumps {mean_jumps}");
        let frac = in_one as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn chain_transition_probability_matches_closed_form() {
        // Two states, rates a (0->1) and b (1->0): P(θ(t)=1 | θ(0)=0) = a/(a+b)(1 - e^{-(a+b)t}).
        let (a, b) = (1.5, 0.5);
        let mut c = two_state(a, b);
        c.initial = vec![1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40_000;
        let hits = (0..n)
            .filter(|_| sample_chain(&c, 1.0, &mut rng).state_at(0.7) == 1)
            .count();
        let expected = a / (a + b) * (1.0 - (-(a + b) * 0.7f64).exp());
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!(((hits as f64 / n as f64) - expected).abs() < 4.0 * se);
    }
}
