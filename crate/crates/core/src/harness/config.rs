use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filters::FilterKind;
use crate::market::{
    AffineRate, AffineVol, ChainSpec, DiscretePrior, DriftMap, GaussianPrior, MarketSpec, Measure,
    OuCoefficients, PriorSpec, RateModel, ReturnLinkedRate, ReturnLinkedVol, VolModel,
};
use crate::pde::EmbeddingKind;
use crate::strategies::Utility;
use crate::timefn::{MatFn, VecFn};

/// Scenario file (TOML). Every table except `model`, `prior` and `grid` is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub prior: PriorConfig,
    #[serde(default)]
    pub utility: UtilityConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub replicate: ReplicateConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub converge: ConvergeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "one_usize")]
    pub n_stocks: usize,
    #[serde(default = "one")]
    pub horizon: f64,
    /// `σ` at `t = 0`, one row per stock.
    pub sigma: Vec<Vec<f64>>,
    /// `dσ/dt`; zero when absent.
    #[serde(default)]
    pub sigma_slope: Option<Vec<Vec<f64>>>,
    /// Scales row `i` of `σ` by `1 + s tanh(R̃_i(t))`.
    #[serde(default)]
    pub vol_sensitivity: Option<f64>,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub rate_slope: f64,
    /// Adds `s tanh(mean_i R̃_i(t))` to the rate.
    #[serde(default)]
    pub rate_sensitivity: Option<f64>,
    /// Drift `θ - k tanh(R̃(t))` instead of `θ`.
    #[serde(default)]
    pub drift_reversion: Option<f64>,
    #[serde(default = "one")]
    pub initial_wealth: f64,
    #[serde(default)]
    pub initial_prices: Option<Vec<f64>>,
    #[serde(default)]
    pub ellipticity: Option<f64>,
    #[serde(default)]
    pub coefficient_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Discrete {
        atoms: Vec<Vec<f64>>,
        probs: Vec<f64>,
        /// Per-atom `dθ/dt`; zero when absent.
        #[serde(default)]
        atom_slopes: Option<Vec<Vec<f64>>>,
    },
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Ou {
        alpha: Vec<Vec<f64>>,
        beta: Vec<Vec<f64>>,
        #[serde(default)]
        loading: Option<Vec<Vec<f64>>>,
        target: Vec<f64>,
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Chain {
        values: Vec<Vec<f64>>,
        generator: Vec<Vec<f64>>,
        initial: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityConfig {
    Log {
        #[serde(default)]
        delta: f64,
    },
    Power {
        order: usize,
    },
}

impl Default for UtilityConfig {
    fn default() -> Self {
        UtilityConfig::Log { delta: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleConfig {
    /// Log or power optimum for the configured utility.
    Optimal,
    Zero,
    /// Log formula with the filter estimate times `scale`.
    Myopic,
    /// Log formula with the prior mean at `t = 0`.
    Frozen,
    /// Log formula with the realised drift times `scale`.
    TrueDrift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(default = "optimal")]
    pub rule: RuleConfig,
    #[serde(default = "one")]
    pub scale: f64,
    /// Filter for the drift estimate; chosen from the prior when absent.
    #[serde(default)]
    pub filter: Option<FilterKind>,
    /// Gauss–Hermite nodes per dimension for Gaussian mixtures.
    #[serde(default = "quadrature_nodes")]
    pub quadrature_nodes: usize,
    /// Admissibility floor on `X̃ - X₀`; breaches are counted in the report.
    #[serde(default)]
    pub floor: Option<f64>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            rule: RuleConfig::Optimal,
            scale: 1.0,
            filter: None,
            quadrature_nodes: quadrature_nodes(),
            floor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
    pub paths: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Measure of the `simulate` bundle.
    #[serde(default = "physical")]
    pub measure: Measure,
    /// Paths written to trace files.
    #[serde(default = "traced_paths")]
    pub traced_paths: usize,
    #[serde(default = "yes")]
    pub paths: bool,
    #[serde(default = "yes")]
    pub cache: bool,
    #[serde(default = "yes")]
    pub filter_trace: bool,
    #[serde(default = "yes")]
    pub riccati: bool,
    #[serde(default = "yes")]
    pub wealth: bool,
    #[serde(default = "yes")]
    pub grid: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            measure: Measure::P,
            traced_paths: traced_paths(),
            paths: true,
            cache: true,
            filter_trace: true,
            riccati: true,
            wealth: true,
            grid: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMethod {
    Fd,
    Fk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateConfig {
    #[serde(default = "finite_paths")]
    pub embedding: EmbeddingKind,
    #[serde(default = "fd")]
    pub method: ValueMethod,
    /// FD nodes per dimension; 201 each when absent.
    #[serde(default)]
    pub nodes: Option<Vec<usize>>,
    #[serde(default = "fd_steps")]
    pub time_steps: usize,
    #[serde(default = "six")]
    pub width: f64,
    #[serde(default)]
    pub bounds: Option<Vec<(f64, f64)>>,
    #[serde(default = "fk_inner")]
    pub fk_inner: usize,
    #[serde(default = "fk_steps")]
    pub fk_steps: usize,
    /// Compare FD and FK at `y₀` and require agreement within 3 SE + 1e-3.
    #[serde(default = "yes")]
    pub check_fk: bool,
    /// Mean `|X̃(T) - ξ̂|` must stay below `tolerance · X₀`.
    #[serde(default = "replication_tolerance")]
    pub tolerance: f64,
    /// Extra time-step factors (dt divided by each) checked for a decreasing error.
    #[serde(default)]
    pub refinements: Vec<usize>,
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingKind::FinitePaths,
            method: ValueMethod::Fd,
            nodes: None,
            time_steps: fd_steps(),
            width: six(),
            bounds: None,
            fk_inner: fk_inner(),
            fk_steps: fk_steps(),
            check_fk: true,
            tolerance: replication_tolerance(),
            refinements: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identity {
    ZbarMartingale,
    ZbarTwoForms,
    EuLog,
    EuPower,
    Budget,
    CeFailure,
    MinVariance,
    Optimality,
    KalmanGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default)]
    pub identities: Vec<Identity>,
    /// Times at which `min_variance` compares estimators.
    #[serde(default = "sample_times")]
    pub sample_times: Vec<f64>,
    /// Mean relative gap allowed by `zbar_two_forms`.
    #[serde(default = "two_forms_tolerance")]
    pub two_forms_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            identities: Vec::new(),
            sample_times: sample_times(),
            two_forms_tolerance: two_forms_tolerance(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// `|X̃(T) - ξ̂|` of the log-optimal strategy.
    LogReplication,
    /// Relative gap between the mixture and exponential forms of `Z̄(T)`.
    ZbarForms,
    /// `|X̃(T) - X₀|` of the zero strategy.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    /// Mean absolute error.
    Strong,
    /// Absolute mean error.
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeConfig {
    #[serde(default = "log_replication")]
    pub study: Study,
    /// Step divisors relative to `grid.dt`, coarsest first.
    #[serde(default = "refinements")]
    pub refinements: Vec<usize>,
    #[serde(default = "strong")]
    pub metric: ErrorMetric,
    /// Accepted band for the fitted order.
    #[serde(default = "expected_order")]
    pub expected_order: (f64, f64),
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self {
            study: Study::LogReplication,
            refinements: refinements(),
            metric: ErrorMetric::Strong,
            expected_order: expected_order(),
        }
    }
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn six() -> f64 {
    6.0
}
fn yes() -> bool {
    true
}
fn optimal() -> RuleConfig {
    RuleConfig::Optimal
}
fn physical() -> Measure {
    Measure::P
}
fn quadrature_nodes() -> usize {
    crate::quadrature::DEFAULT_NODES
}
fn traced_paths() -> usize {
    10
}
fn finite_paths() -> EmbeddingKind {
    EmbeddingKind::FinitePaths
}
fn fd() -> ValueMethod {
    ValueMethod::Fd
}
fn fd_steps() -> usize {
    128
}
fn fk_inner() -> usize {
    4000
}
fn fk_steps() -> usize {
    64
}
fn replication_tolerance() -> f64 {
    5e-3
}
fn sample_times() -> Vec<f64> {
    vec![0.5, 1.0]
}
fn two_forms_tolerance() -> f64 {
    1e-2
}
fn log_replication() -> Study {
    Study::LogReplication
}
fn refinements() -> Vec<usize> {
    vec![1, 2, 4, 8]
}
fn strong() -> ErrorMetric {
    ErrorMetric::Strong
}
fn expected_order() -> (f64, f64) {
    (0.8, 1.2)
}

/// Command-line values that replace the corresponding config entries.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub paths: Option<usize>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn with_overrides(mut self, o: Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(dt) = o.dt {
            self.grid.dt = dt;
        }
        if let Some(p) = o.paths {
            self.grid.paths = p;
        }
        self
    }

    /// SHA-256 of the canonical JSON form, so overrides change the hash and
    /// formatting of the source file does not.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn market(&self) -> Result<MarketSpec<f64>> {
        let m = &self.model;
        let n = m.n_stocks;
        let sigma = matrix("model.sigma", &m.sigma, n, n)?;
        let slope = match &m.sigma_slope {
            Some(s) => matrix("model.sigma_slope", s, n, n)?,
            None => DMatrix::zeros(n, n),
        };
        let base = MatFn::affine(sigma, slope);
        let vol: Arc<dyn VolModel<f64>> = match m.vol_sensitivity {
            Some(s) => Arc::new(ReturnLinkedVol {
                base,
                sensitivity: s,
            }),
            None => Arc::new(AffineVol(base)),
        };
        let rate: Arc<dyn RateModel<f64>> = match m.rate_sensitivity {
            Some(s) => Arc::new(ReturnLinkedRate {
                base: m.rate,
                sensitivity: s,
            }),
            None => Arc::new(AffineRate {
                level: m.rate,
                slope: m.rate_slope,
            }),
        };
        let mut spec = MarketSpec::new(n, m.horizon, vol, self.prior(n)?)
            .with_rate(rate)
            .with_initial_wealth(m.initial_wealth);
        if let Some(k) = m.drift_reversion {
            spec = spec.with_drift_map(DriftMap::ReturnReverting { speed: k });
        }
        if let Some(p) = &m.initial_prices {
            spec = spec.with_initial_prices(p.clone());
        }
        if let Some(c) = m.ellipticity {
            spec = spec.with_ellipticity(c);
        }
        if let Some(b) = m.coefficient_bound {
            spec = spec.with_coefficient_bound(b);
        }
        spec.validate()?;
        Ok(spec)
    }

    fn prior(&self, n: usize) -> Result<PriorSpec<f64>> {
        Ok(match &self.prior {
            PriorConfig::Discrete {
                atoms,
                probs,
                atom_slopes,
            } => {
                if let Some(s) = atom_slopes {
                    if s.len() != atoms.len() {
                        return Err(Error::Config("prior.atom_slopes needs one row per atom".into()));
                    }
                }
                let atoms = atoms
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        let level = vector("prior.atoms", a, n)?;
                        let slope = match atom_slopes {
                            Some(s) => vector("prior.atom_slopes", &s[i], n)?,
                            None => DVector::zeros(n),
                        };
                        Ok(VecFn::affine(level, slope))
                    })
                    .collect::<Result<_>>()?;
                PriorSpec::Discrete(DiscretePrior {
                    atoms,
                    probs: probs.clone(),
                })
            }
            PriorConfig::Gaussian { mean, cov } => PriorSpec::GaussianStatic(GaussianPrior {
                mean: vector("prior.mean", mean, n)?,
                cov: matrix("prior.cov", cov, n, n)?,
            }),
            PriorConfig::Ou {
                alpha,
                beta,
                loading,
                target,
                mean,
                cov,
            } => PriorSpec::OrnsteinUhlenbeck(OuCoefficients {
                alpha: MatFn::constant(matrix("prior.alpha", alpha, n, n)?),
                beta: MatFn::constant(matrix("prior.beta", beta, n, n)?),
                loading: MatFn::constant(match loading {
                    Some(l) => matrix("prior.loading", l, n, n)?,
                    None => DMatrix::zeros(n, n),
                }),
                target: VecFn::constant(vector("prior.target", target, n)?),
                mean0: vector("prior.mean", mean, n)?,
                cov0: matrix("prior.cov", cov, n, n)?,
            }),
            PriorConfig::Chain {
                values,
                generator,
                initial,
            } => {
                let d = values.len();
                PriorSpec::MarkovChain(ChainSpec {
                    values: values
                        .iter()
                        .map(|v| vector("prior.values", v, n))
                        .collect::<Result<_>>()?,
                    generator: MatFn::constant(matrix("prior.generator", generator, d, d)?),
                    initial: initial.clone(),
                })
            }
        })
    }

    pub fn utility(&self) -> Utility<f64> {
        match self.utility {
            UtilityConfig::Log { delta } => Utility::Log { delta },
            UtilityConfig::Power { order } => Utility::Power { order },
        }
    }
}

fn vector(name: &str, v: &[f64], n: usize) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(Error::Config(format!("{name}: expected {n} entries, got {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

fn matrix(name: &str, rows: &[Vec<f64>], r: usize, c: usize) -> Result<DMatrix<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{name}: expected a {r}x{c} matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 7
        [model]
        sigma = [[0.2]]
        [prior]
        kind = "discrete"
        atoms = [[-0.1], [0.0], [0.2]]
        probs = [0.25, 0.25, 0.5]
        [grid]
        dt = 0.0078125
        paths = 100
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = Config::from_toml(MINIMAL).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.utility, UtilityConfig::Log { delta: 0.0 });
        assert_eq!(c.strategy.rule, RuleConfig::Optimal);
        assert_eq!(c.converge.refinements, vec![1, 2, 4, 8]);
        let spec = c.market().unwrap();
        assert_eq!(spec.n_stocks, 1);
        assert!(matches!(spec.prior, PriorSpec::Discrete(ref p) if p.atoms.len() == 3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("paths = 100", "paths = 100\nbogus = 1");
        assert!(matches!(Config::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn shape_errors_name_the_field() {
        let text = MINIMAL.replace("sigma = [[0.2]]", "sigma = [[0.2, 0.1]]");
        let err = Config::from_toml(&text).unwrap().market().unwrap_err();
        assert!(err.to_string().contains("model.sigma"));
    }

    #[test]
    fn hash_tracks_overrides() {
        let c = Config::from_toml(MINIMAL).unwrap();
        let h = c.hash();
        assert_eq!(h, c.clone().hash());
        assert_eq!(h.len(), 64);
        let o = c.with_overrides(Overrides {
            seed: Some(8),
            ..Overrides::default()
        });
        assert_ne!(o.hash(), h);
    }
}
