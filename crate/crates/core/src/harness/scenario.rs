use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{Config, RuleConfig, UtilityConfig};
use super::mc::{quantile, McEstimate};
use super::table::{write_json, write_table, Format};
use super::trace::{run_filter, write_filter_csv, write_riccati_csv, FilterTrace};
use crate::error::{Error, Result};
use crate::filters::{
    build_tilted_prior, riccati_integrate, ChainForwardFilter, CovarianceTable, DriftFilter,
    FilterKind, KalmanFilter, MixtureFilter, TiltedPrior, WonhamFilter, RICCATI_BOUND,
};
use crate::market::{
    write_cache, write_paths_csv, Measure, MarketSpec, OuCoefficients, PathBundle, PriorSpec,
    SamplePath, Simulator, TimeGrid, VolField,
};
use crate::strategies::{
    optimal_claim, trade, write_wealth_csv, StrategyRule, Utility, WealthTrace,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Largest gap allowed between the integrated and closed-form scalar Riccati paths.
pub const RICCATI_CLOSED_FORM: f64 = 1e-8;

/// Seed of the `P*` sample, kept apart from the `P` sample of the same run.
pub fn pstar_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// One pass/fail comparison of two sides of an identity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of `lhs - rhs` for statistical checks.
    pub se: Option<f64>,
    /// Allowed gap: `k·se + slack` or a fixed tolerance.
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    /// `|lhs - rhs| ≤ k·se + slack`.
    pub fn statistical(name: &str, lhs: f64, rhs: f64, se: f64, k: f64, slack: f64) -> Self {
        let tolerance = k * se + slack;
        Self {
            name: name.into(),
            pass: (lhs - rhs).abs() <= tolerance,
            lhs,
            rhs,
            se: Some(se),
            tolerance,
            detail: format!("|lhs - rhs| <= {k} SE + {slack:e}"),
        }
    }

    /// `|lhs - rhs| ≤ tolerance`.
    pub fn deterministic(name: &str, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            pass: (lhs - rhs).abs() <= tolerance,
            lhs,
            rhs,
            se: None,
            tolerance,
            detail: format!("|lhs - rhs| <= {tolerance:e}"),
        }
    }

    /// `lhs ≤ rhs`.
    pub fn at_most(name: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            pass: lhs <= rhs,
            lhs,
            rhs,
            se: None,
            tolerance: 0.0,
            detail: "lhs <= rhs".into(),
        }
    }

    /// `lhs ≥ rhs`.
    pub fn at_least(name: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            pass: lhs >= rhs,
            lhs,
            rhs,
            se: None,
            tolerance: 0.0,
            detail: "lhs >= rhs".into(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

/// JSON report of one command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub dt: f64,
    pub paths: usize,
    pub results: Value,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
    pub pass: bool,
}

impl Report {
    pub fn new(command: &str, scenario: &Scenario) -> Self {
        Self {
            command: command.into(),
            config_hash: scenario.config.hash(),
            seed: scenario.config.seed,
            code_version: CODE_VERSION.into(),
            dt: scenario.config.grid.dt,
            paths: scenario.config.grid.paths,
            results: json!({}),
            checks: Vec::new(),
            artifacts: Vec::new(),
            pass: true,
        }
    }

    pub fn check(&mut self, c: Check) {
        self.pass &= c.pass;
        self.checks.push(c);
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value)?;
        self.results
            .as_object_mut()
            .expect("results is an object")
            .insert(key.into(), v);
        Ok(())
    }

    /// Writes `<dir>/<command>.json` and records it as an artifact.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        let name = format!("{}.json", self.command);
        self.artifacts.push(name.clone());
        write_json(&dir.join(name), self)
    }
}

/// A validated configuration with everything built that does not depend on
/// the sample.
pub struct Scenario {
    pub config: Config,
    pub spec: MarketSpec<f64>,
    pub utility: Utility<f64>,
    pub grid: TimeGrid<f64>,
    pub vol: VolField<f64>,
    pub filter_kind: FilterKind,
    pub tilted: Option<TiltedPrior<f64>>,
    /// Riccati solution on `grid`, shared by every Kalman filter.
    kalman_table: Option<Arc<CovarianceTable<f64>>>,
}

impl Scenario {
    /// Builds the market and checks that the chosen filter, strategy and
    /// utility fit the prior, before anything is simulated.
    pub fn new(config: Config) -> Result<Self> {
        let spec = config.market()?;
        let grid = TimeGrid::new(spec.horizon, config.grid.dt)?;
        if config.grid.paths < 2 {
            return Err(Error::Config("grid.paths must be at least 2".into()));
        }
        let vol = spec.vol_field(&grid)?;
        let utility = config.utility();
        let filter_kind = config
            .strategy
            .filter
            .unwrap_or_else(|| FilterKind::default_for(&spec.prior));
        let mut s = Self {
            config,
            spec,
            utility,
            grid,
            vol,
            filter_kind,
            tilted: None,
            kalman_table: None,
        };
        if let (FilterKind::Kalman, VolField::Tabulated(table)) = (filter_kind, &s.vol) {
            if let Some(coeffs) = s.kalman_coefficients() {
                s.kalman_table = Some(Arc::new(CovarianceTable::new(&coeffs, &s.grid, table)?));
            }
        }
        s.build_filter(filter_kind)?;
        if let UtilityConfig::Power { order } = s.config.utility {
            if order < 2 {
                return Err(Error::Config("utility.order must be at least 2".into()));
            }
            let capable = matches!(
                s.spec.prior,
                PriorSpec::Discrete(_) | PriorSpec::GaussianStatic(_)
            );
            let q_path = s.vol.q_path();
            match (capable && s.spec.drift_map.is_identity(), q_path) {
                (true, Some(q)) => {
                    s.tilted = Some(build_tilted_prior(&s.spec.prior, &q, &s.grid, order)?)
                }
                _ => {
                    if s.config.strategy.rule == RuleConfig::Optimal {
                        return Err(Error::Incompatible(
                            "power strategy needs a discrete or static Gaussian prior, \
                             deterministic volatility and the identity drift map"
                                .into(),
                        ));
                    }
                }
            }
        }
        Ok(s)
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn paths(&self) -> usize {
        self.config.grid.paths
    }

    pub fn n(&self) -> usize {
        self.spec.n_stocks
    }

    pub fn x0(&self) -> f64 {
        self.spec.initial_wealth
    }

    pub fn simulator(&self, measure: Measure) -> Result<Simulator<'_, f64>> {
        Simulator::new(&self.spec, self.grid, measure)
    }

    pub fn is_power(&self) -> bool {
        matches!(self.utility, Utility::Power { .. })
    }

    fn kalman_coefficients(&self) -> Option<OuCoefficients<f64>> {
        match &self.spec.prior {
            PriorSpec::GaussianStatic(g) => Some(OuCoefficients::static_prior(g.mean.clone(), g.cov.clone())),
            PriorSpec::OrnsteinUhlenbeck(c) => Some(c.clone()),
            _ => None,
        }
    }

    /// Filter of the given kind honouring the configured quadrature size.
    pub fn build_filter(&self, kind: FilterKind) -> Result<Box<dyn DriftFilter<f64>>> {
        let spec = &self.spec;
        let map = spec.drift_map.clone();
        let incompatible =
            || Error::Incompatible(format!("{kind:?} filter does not apply to this prior"));
        let kalman_map = || {
            if spec.drift_map.is_identity() {
                Ok(())
            } else {
                Err(Error::Incompatible(
                    "Kalman filter requires the identity drift map".into(),
                ))
            }
        };
        Ok(match (kind, &spec.prior) {
            (FilterKind::Mixture, PriorSpec::Discrete(_) | PriorSpec::GaussianStatic(_)) => {
                Box::new(MixtureFilter::from_prior(
                    &spec.prior,
                    map,
                    self.config.strategy.quadrature_nodes,
                )?)
            }
            (FilterKind::Kalman, PriorSpec::GaussianStatic(_) | PriorSpec::OrnsteinUhlenbeck(_)) => {
                kalman_map()?;
                let coeffs = self.kalman_coefficients().ok_or_else(incompatible)?;
                Box::new(match &self.kalman_table {
                    Some(t) => KalmanFilter::with_table(coeffs, t.clone()),
                    None => KalmanFilter::new(coeffs),
                })
            }
            (FilterKind::Wonham, PriorSpec::MarkovChain(c)) => {
                Box::new(WonhamFilter::new(c.clone(), map, spec.n_stocks)?)
            }
            (FilterKind::Forward, PriorSpec::MarkovChain(c)) => {
                Box::new(ChainForwardFilter::new(c.clone(), map))
            }
            _ => return Err(incompatible()),
        })
    }

    /// Filter that carries `log Z̄`: the mixture for discrete and static
    /// Gaussian priors, the forward recursion for chains.
    pub fn density_filter(&self) -> Result<Box<dyn DriftFilter<f64>>> {
        match &self.spec.prior {
            PriorSpec::Discrete(_) | PriorSpec::GaussianStatic(_) => {
                self.build_filter(FilterKind::Mixture)
            }
            PriorSpec::MarkovChain(_) => self.build_filter(FilterKind::Forward),
            PriorSpec::OrnsteinUhlenbeck(_) => Err(Error::Incompatible(
                "the mixture density is not available for linear drift dynamics".into(),
            )),
        }
    }

    /// Filter feeding the configured strategy; `None` when the rule does not
    /// use an estimate.
    pub fn strategy_filter(&self) -> Result<Option<Box<dyn DriftFilter<f64>>>> {
        match self.config.strategy.rule {
            RuleConfig::Zero | RuleConfig::Frozen | RuleConfig::TrueDrift => Ok(None),
            RuleConfig::Optimal if self.is_power() => {
                let tilted = self.tilted.as_ref().ok_or(Error::MissingTiltedPrior)?;
                Ok(Some(Box::new(tilted.filter()?)))
            }
            _ => self.build_filter(self.filter_kind).map(Some),
        }
    }

    pub fn rule(&self) -> StrategyRule<f64> {
        let delta = self.utility.delta();
        let s = &self.config.strategy;
        match s.rule {
            RuleConfig::Optimal => match self.utility {
                Utility::Power { order } => StrategyRule::Power { order },
                _ => StrategyRule::Log { delta },
            },
            RuleConfig::Zero => StrategyRule::Zero,
            RuleConfig::Myopic => StrategyRule::Myopic {
                delta,
                scale: s.scale,
            },
            RuleConfig::Frozen => StrategyRule::Frozen {
                delta,
                estimate: self.spec.prior.initial_mean(self.n()),
            },
            RuleConfig::TrueDrift => StrategyRule::TrueDrift {
                delta,
                scale: s.scale,
            },
        }
    }

    /// `λ̂`: closed form for log, `(G / X₀)^{1/l}` for power with the exact
    /// normaliser.
    pub fn lambda(&self) -> Result<f64> {
        let x0 = self.x0();
        match &self.utility {
            Utility::Log { delta } => Ok(1.0 / (x0 + delta)),
            Utility::Power { order } => {
                let g = self
                    .tilted
                    .as_ref()
                    .ok_or(Error::MissingTiltedPrior)?
                    .normalizer();
                Ok((g / x0).powf(1.0 / *order as f64))
            }
            Utility::Generic(_) => Err(Error::Incompatible(
                "generic utilities are solved through the pde module".into(),
            )),
        }
    }

    /// Expected utility of the optimum: `ln(X₀+δ) + ½E∫â^TQâdt` is path
    /// dependent, so only the power value `X₀^{δ_u} G^{1/l} / δ_u` is returned.
    pub fn power_value(&self) -> Result<f64> {
        let Utility::Power { order } = self.utility else {
            return Err(Error::Incompatible("power value needs power utility".into()));
        };
        let g = self
            .tilted
            .as_ref()
            .ok_or(Error::MissingTiltedPrior)?
            .normalizer();
        let du = self.utility.exponent();
        Ok(self.x0().powf(du) * g.powf(1.0 / order as f64) / du)
    }

    /// `log Z̄(T)` along a path from the density filter.
    pub fn log_zbar(&self, path: &SamplePath<f64>) -> Result<f64> {
        let mut f = self.density_filter()?;
        let tr = run_filter(&self.spec, &self.grid, &self.vol, path, f.as_mut(), false)?;
        tr.terminal_log_zbar()
            .ok_or_else(|| Error::Incompatible("filter does not carry the mixture density".into()))
    }

    /// Trades the configured rule on one path; `claim` is `ξ̂` for the
    /// optimal rule.
    pub fn run_path(&self, path: &SamplePath<f64>, record: bool, lambda: Option<f64>) -> Result<WealthTrace<f64>> {
        let mut filter = self.strategy_filter()?;
        let mut tr = trade(
            &self.spec,
            &self.grid,
            &self.vol,
            path,
            filter.as_mut().map(|f| &mut **f as &mut dyn DriftFilter<f64>),
            &self.rule(),
            self.tilted.as_ref(),
            record,
        )?;
        if let Some(lambda) = lambda {
            let log_zbar = match tr.log_zbar {
                Some(l) => l,
                None => self.log_zbar(path)?,
            };
            tr.log_zbar = Some(log_zbar);
            tr.claim = Some(optimal_claim(&self.utility, lambda, log_zbar.exp())?);
        }
        Ok(tr)
    }

    /// Runs `f` on paths `0..paths` of the given measure in parallel, in
    /// index order, without keeping the paths.
    pub fn map_paths<R: Send>(
        &self,
        measure: Measure,
        seed: u64,
        f: impl Fn(&SamplePath<f64>) -> Result<R> + Sync,
    ) -> Result<Vec<R>> {
        let sim = self.simulator(measure)?;
        (0..self.paths())
            .into_par_iter()
            .map(|i| f(&sim.path(seed, i)?))
            .collect()
    }

    /// Whether `λ̂` and `ξ̂` are defined for this scenario.
    pub fn has_claim(&self) -> bool {
        self.config.strategy.rule == RuleConfig::Optimal
            && !matches!(self.spec.prior, PriorSpec::OrnsteinUhlenbeck(_))
    }
}

/// Error quantiles of `|X̃(T) - ξ̂|`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
    pub max: f64,
}

impl ErrorSummary {
    pub fn new(errors: &[f64]) -> Self {
        Self {
            mean: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
            q50: quantile(errors, 0.5),
            q90: quantile(errors, 0.9),
            q99: quantile(errors, 0.99),
            max: errors.iter().copied().fold(0.0, f64::max),
        }
    }
}

fn traced(s: &Scenario, index: usize) -> bool {
    index < s.config.outputs.traced_paths
}

/// `optimize`: `λ̂`, the configured strategy on `P` paths, expected utility,
/// replication errors against `ξ̂`, and the budget identity on `P*` paths.
pub fn run_scenario(s: &Scenario, out: Option<&Path>, format: Format) -> Result<Report> {
    let mut report = Report::new("optimize", s);
    let lambda = if s.has_claim() { Some(s.lambda()?) } else { None };
    let traces = s.map_paths(Measure::P, s.seed(), |p| {
        s.run_path(p, out.is_some() && traced(s, p.index), lambda)
    })?;
    let x0 = s.x0();
    let utilities: Vec<f64> = traces.iter().map(|t| s.utility.utility(t.terminal)).collect();
    let eu = McEstimate::from_samples("expected_utility", &utilities)?;
    let terminal: Vec<f64> = traces.iter().map(|t| t.terminal).collect();
    report.result("lambda_hat", lambda)?;
    report.result("expected_utility", &eu)?;
    report.result(
        "terminal_wealth",
        McEstimate::from_samples("terminal_wealth", &terminal)?,
    )?;
    if let Some(floor) = s.config.strategy.floor {
        let breaches = traces.iter().filter(|t| t.breached(floor)).count();
        report.result("admissibility_breaches", breaches)?;
        report.check(Check::at_most(
            "admissibility",
            breaches as f64,
            0.0,
        ));
    }

    if s.config.strategy.rule == RuleConfig::Optimal {
        match &s.utility {
            Utility::Log { delta } => {
                let rhs: Vec<f64> = traces
                    .iter()
                    .map(|t| (x0 + delta).ln() + 0.5 * t.information)
                    .collect();
                let diff = McEstimate::paired("eu_log_gap", &utilities, &rhs)?;
                let formula = McEstimate::from_samples("eu_log_formula", &rhs)?;
                report.result("expected_utility_formula", &formula)?;
                report.check(
                    Check::statistical("expected_utility", eu.mean, formula.mean, diff.se, 3.0, 0.0)
                        .with_detail("E ln(X(T)+delta) vs ln(X0+delta) + E int a^T Q a dt / 2, paired, 3 SE"),
                );
            }
            Utility::Power { .. } => {
                let value = s.power_value()?;
                report.result("expected_utility_formula", value)?;
                report.check(Check::statistical("expected_utility", eu.mean, value, eu.se, 3.0, 0.0));
            }
            Utility::Generic(_) => {}
        }
    }

    if let Some(lambda) = lambda {
        let errors: Vec<f64> = traces.iter().filter_map(|t| t.replication_error()).collect();
        report.result("replication_error", ErrorSummary::new(&errors))?;
        let claims = s.map_paths(Measure::PStar, pstar_seed(s.seed()), |p| {
            optimal_claim(&s.utility, lambda, s.log_zbar(p)?.exp())
        })?;
        let budget = McEstimate::from_samples("budget", &claims)?;
        report.check(Check::statistical("budget", budget.mean, x0, budget.se, 3.0, 0.0));
        report.result("budget", &budget)?;
    }

    if let Some(dir) = out {
        if s.config.outputs.wealth {
            let recorded: Vec<WealthTrace<f64>> =
                traces.into_iter().filter(|t| !t.normalized.is_empty()).collect();
            let p = write_table(dir, "wealth", format, |buf| {
                write_wealth_csv(&recorded, &s.grid, s.n(), buf)
            })?;
            report.artifacts.push(file_name(&p));
        }
        report.write(dir)?;
    }
    Ok(report)
}

/// `simulate`: a path bundle under the configured measure, exported as a
/// table and a binary cache, with the martingale check of `R̃(T)` under
/// `P*` or of `R̃(T) - ∫ã dt` under `P`.
pub fn simulate(s: &Scenario, out: Option<&Path>, format: Format) -> Result<Report> {
    let mut report = Report::new("simulate", s);
    let measure = s.config.outputs.measure;
    let sim = s.simulator(measure)?;
    let bundle = sim.bundle(s.paths(), s.seed())?;
    let n = s.n();
    let dt = s.grid.dt();
    report.result("measure", measure)?;
    report.result("steps", s.grid.steps())?;
    for i in 0..n {
        let samples: Vec<f64> = bundle
            .paths
            .iter()
            .map(|p| {
                let drift: f64 = match measure {
                    Measure::P => (0..p.steps())
                        .map(|k| p.drift_at(k).map_or(0.0, |a| a[i]) * dt)
                        .sum(),
                    Measure::PStar => 0.0,
                };
                p.terminal_excess()[i] - drift
            })
            .collect();
        let est = McEstimate::from_samples(format!("martingale_part_{}", i + 1), &samples)?;
        report.check(Check::statistical(&est.label, est.mean, 0.0, est.se, 3.0, 0.0).with_detail(
            "terminal excess return minus integrated drift has mean zero, 3 SE",
        ));
        report.result(&est.label.clone(), &est)?;
    }
    if let Some(dir) = out {
        write_bundle(&bundle, dir, format, s.config.outputs.paths, s.config.outputs.cache, &mut report)?;
        report.write(dir)?;
    }
    Ok(report)
}

fn write_bundle(
    bundle: &PathBundle<f64>,
    dir: &Path,
    format: Format,
    table: bool,
    cache: bool,
    report: &mut Report,
) -> Result<()> {
    if table {
        let p = write_table(dir, "paths", format, |buf| write_paths_csv(bundle, buf))?;
        report.artifacts.push(file_name(&p));
    }
    if cache {
        let path = dir.join("paths.bin");
        let mut w = BufWriter::new(File::create(&path)?);
        write_cache(bundle, &mut w)?;
        report.artifacts.push("paths.bin".into());
    }
    Ok(())
}

pub(crate) fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `filter`: the configured filter on `P` paths. Reports the terminal
/// squared error and the posterior sanity checks; exports traces and, for
/// Gaussian priors with deterministic volatility, the Riccati path.
pub fn filter(s: &Scenario, out: Option<&Path>, format: Format) -> Result<Report> {
    let mut report = Report::new("filter", s);
    let kind = s.filter_kind;
    let steps = s.grid.steps();
    let traces: Vec<(FilterTrace, f64)> = s.map_paths(Measure::P, s.seed(), |p| {
        let mut f = s.build_filter(kind)?;
        let record = out.is_some() && traced(s, p.index);
        let tr = run_filter(&s.spec, &s.grid, &s.vol, p, f.as_mut(), record || kind == FilterKind::Wonham)?;
        let truth = p.drift_at(steps - 1).map(|a| a.to_vec()).unwrap_or_default();
        let est = tr.estimate(tr.estimates.len() / tr.n - 1);
        let err: f64 = truth.iter().zip(est).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((tr, err))
    })?;
    report.result("filter", kind)?;
    let errors: Vec<f64> = traces.iter().map(|t| t.1).collect();
    report.result(
        "terminal_squared_error",
        McEstimate::from_samples("terminal_squared_error", &errors)?,
    )?;
    let zbar: Vec<f64> = traces
        .iter()
        .filter_map(|t| t.0.terminal_log_zbar())
        .collect();
    if zbar.len() >= 2 {
        report.result("log_zbar", McEstimate::from_samples("log_zbar", &zbar)?)?;
    }
    if kind == FilterKind::Wonham {
        let worst = traces
            .iter()
            .flat_map(|t| t.0.states.iter())
            .map(|p| {
                let sum: f64 = p.iter().sum();
                let neg = p.iter().fold(0.0f64, |m, v| m.max(-v));
                (sum - 1.0).abs().max(neg)
            })
            .fold(0.0, f64::max);
        report.check(Check::deterministic("simplex", worst, 0.0, 1e-12).with_detail(
            "max over steps of |sum p - 1| and negative mass",
        ));
    }

    let mut gammas = None;
    if let (Some(table), PriorSpec::GaussianStatic(_) | PriorSpec::OrnsteinUhlenbeck(_)) =
        (match &s.vol {
            VolField::Tabulated(t) => Some(t.clone()),
            VolField::PathDependent { .. } => None,
        }, &s.spec.prior)
    {
        let coeffs = match &s.spec.prior {
            PriorSpec::GaussianStatic(g) => OuCoefficients::static_prior(g.mean.clone(), g.cov.clone()),
            PriorSpec::OrnsteinUhlenbeck(c) => c.clone(),
            _ => unreachable!(),
        };
        let g = riccati_integrate(&coeffs.cov0, &coeffs, &s.grid, &table, RICCATI_BOUND)?;
        let scalar_static = s.n() == 1
            && matches!(s.spec.prior, PriorSpec::GaussianStatic(_))
            && s.spec.vol.is_constant();
        if scalar_static {
            let v = coeffs.cov0[(0, 0)];
            let q = table[0].q[(0, 0)];
            let worst = g
                .iter()
                .enumerate()
                .map(|(k, gk)| (gk[(0, 0)] - v / (1.0 + v * q * s.grid.time(k))).abs())
                .fold(0.0, f64::max);
            report.check(
                Check::deterministic("riccati_closed_form", worst, 0.0, RICCATI_CLOSED_FORM)
                    .with_detail("max over t of |gamma(t) - v / (1 + v q t)|"),
            );
        }
        if let Some(final_cov) = traces.first().and_then(|t| last_gaussian(&t.0)) {
            report.result("terminal_covariance", final_cov)?;
        }
        gammas = Some(g);
    }

    if let Some(dir) = out {
        if s.config.outputs.filter_trace {
            let recorded: Vec<FilterTrace> = traces
                .into_iter()
                .map(|t| t.0)
                .filter(|t| traced(s, t.path))
                .collect();
            let p = write_table(dir, "filter_trace", format, |buf| {
                write_filter_csv(&recorded, &s.grid, buf)
            })?;
            report.artifacts.push(file_name(&p));
        }
        if let (true, Some(g)) = (s.config.outputs.riccati, gammas.as_ref()) {
            let p = write_table(dir, "riccati", format, |buf| write_riccati_csv(g, &s.grid, buf))?;
            report.artifacts.push(file_name(&p));
        }
        report.write(dir)?;
    }
    Ok(report)
}

fn last_gaussian(tr: &FilterTrace) -> Option<Vec<f64>> {
    let n = tr.n;
    tr.states.last().map(|v| v[n..].to_vec())
}

/// `â` of the configured filter at `t_k` for every `k`, as vectors.
pub fn estimates(tr: &FilterTrace) -> Vec<DVector<f64>> {
    tr.estimates
        .chunks(tr.n)
        .map(DVector::from_column_slice)
        .collect()
}
