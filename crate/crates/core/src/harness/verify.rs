use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::Identity;
use super::mc::McEstimate;
use super::scenario::{pstar_seed, Check, Report, Scenario};
use super::trace::{run_filter, FilterTrace};
use crate::error::{Error, Result};
use crate::filters::{build_tilted_prior, DriftFilter, FilterKind};
use crate::likelihood::zbar_exponential;
use crate::market::{DiscretePrior, Measure, PriorSpec, SamplePath, TimeGrid, VolField};
use crate::strategies::{optimal_claim, trade, StrategyRule, Utility, WealthTrace};
use crate::timefn::VecFn;

/// Share of `(path, t)` points where the power and Bayes estimates must differ.
pub const CE_SHARE: f64 = 0.99;
/// Gap counted as a difference between the two estimates.
pub const CE_GAP: f64 = 1e-3;
/// Agreement required for a point-mass prior.
pub const CE_POINT_MASS: f64 = 1e-12;
/// Accepted range of `gap(dt/2) / gap(dt)` for the two forms of `Z̄`.
pub const HALVING_BAND: (f64, f64) = (0.35, 0.65);
/// Kalman and grid-Bayes estimates must agree to this along every path.
pub const KALMAN_GRID_TOLERANCE: f64 = 1e-3;
/// Common paths compared by the Kalman/grid identity.
pub const KALMAN_GRID_PATHS: usize = 100;

/// Runs the configured identities and writes `verify.json`.
pub fn run_verify(s: &Scenario, out: Option<&Path>) -> Result<Report> {
    let mut report = Report::new("verify", s);
    if s.config.verify.identities.is_empty() {
        return Err(Error::Config("verify.identities is empty".into()));
    }
    for id in &s.config.verify.identities {
        let checks = match id {
            Identity::ZbarMartingale => zbar_martingale(s, &mut report)?,
            Identity::ZbarTwoForms => zbar_two_forms(s, &mut report)?,
            Identity::EuLog => eu_log(s, &mut report)?,
            Identity::EuPower => eu_power(s, &mut report)?,
            Identity::Budget => budget(s, &mut report)?,
            Identity::CeFailure => ce_failure(s, &mut report)?,
            Identity::MinVariance => min_variance(s, &mut report)?,
            Identity::Optimality => optimality(s, &mut report)?,
            Identity::KalmanGrid => kalman_grid(s, &mut report)?,
        };
        for c in checks {
            report.check(c);
        }
    }
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

fn density_trace(s: &Scenario, grid: &TimeGrid<f64>, vol: &VolField<f64>, path: &SamplePath<f64>, record: bool) -> Result<FilterTrace> {
    let mut f = s.density_filter()?;
    run_filter(&s.spec, grid, vol, path, f.as_mut(), record)
}

fn terminal_zbar(tr: &FilterTrace) -> Result<f64> {
    tr.terminal_log_zbar()
        .map(f64::exp)
        .ok_or_else(|| Error::Incompatible("filter does not carry the mixture density".into()))
}

/// `E* Z̄(T) = 1` on `P*` paths.
fn zbar_martingale(s: &Scenario, report: &mut Report) -> Result<Vec<Check>> {
    let z = s.map_paths(Measure::PStar, pstar_seed(s.seed()), |p| {
        terminal_zbar(&density_trace(s, &s.grid, &s.vol, p, false)?)
    })?;
    let est = McEstimate::from_samples("zbar_terminal_pstar", &z)?;
    report.result("zbar_martingale", &est)?;
    Ok(vec![Check::statistical("zbar_martingale", est.mean, 1.0, est.se, 3.0, 0.0)
        .with_detail("E* Zbar(T) = 1 within 3 SE")])
}

/// `max_k |Z̄_mix(t_k) - Z̄_exp(t_k)| / Z̄_mix(t_k)` along one path.
pub fn two_forms_gap(s: &Scenario, grid: &TimeGrid<f64>, vol: &VolField<f64>, path: &SamplePath<f64>) -> Result<f64> {
    let tr = density_trace(s, grid, vol, path, true)?;
    let exp = zbar_exponential(&tr.estimates, &tr.q, &path.excess, s.n(), grid.dt())?;
    tr.log_zbar
        .iter()
        .zip(&exp)
        .map(|(l, e)| {
            let mix = l
                .map(f64::exp)
                .ok_or_else(|| Error::Incompatible("filter does not carry the mixture density".into()))?;
            Ok((mix - e).abs() / mix)
        })
        .try_fold(0.0, |m, g: Result<f64>| Ok(f64::max(m, g?)))
}

/// Mixture and exponential forms of `Z̄(T)` agree, with a gap that halves
/// with the step.
fn zbar_two_forms(s: &Scenario, report: &mut Report) -> Result<Vec<Check>> {
    let sim = s.simulator(Measure::PStar)?;
    let fine = s.grid.refine(2);
    let fine_vol = s.spec.vol_field(&fine)?;
    let seed = pstar_seed(s.seed());
    let pairs: Vec<(f64, f64)> = par_indices(s.paths(), |i| {
        let paths = sim.coupled(seed, i, &[1, 2])?;
        Ok((
            two_forms_gap(s, &s.grid, &s.vol, &paths[0])?,
            two_forms_gap(s, &fine, &fine_vol, &paths[1])?,
        ))
    })?;
    let coarse: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let finer: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let c = McEstimate::from_samples("two_forms_gap_dt", &coarse)?;
    let f = McEstimate::from_samples("two_forms_gap_half_dt", &finer)?;
    let ratio = f.mean / c.mean;
    report.result("zbar_two_forms", [&c, &f])?;
    report.result("zbar_two_forms_ratio", ratio)?;
    let tol = s.config.verify.two_forms_tolerance;
    Ok(vec![
        Check::at_most("zbar_two_forms", c.mean, tol)
            .with_detail("mean over paths of the largest relative gap between the two forms"),
        Check {
            name: "zbar_two_forms_halving".into(),
            pass: (HALVING_BAND.0..=HALVING_BAND.1).contains(&ratio),
            lhs: ratio,
            rhs: 0.5,
            se: None,
            tolerance: 0.15,
            detail: "gap(dt/2) / gap(dt) in [0.35, 0.65]".into(),
        },
    ])
}

fn par_indices<R: Send>(n: usize, f: impl Fn(usize) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

fn require_optimal_claim(s: &Scenario) -> Result<f64> {
    if !s.has_claim() {
        return Err(Error::Incompatible(
            "identity needs the optimal rule and a prior with a mixture density".into(),
        ));
    }
    s.lambda()
}

/// `E ln(X̃(T)+δ) = ln(X₀+δ) + ½E∫â^TQâ dt` for the log-optimal strategy.
fn eu_log(s: &Scenario, report: &mut Report) -> Result<Vec<Check>> {
    let Utility::Log { delta } = s.utility else {
        return Err(Error::Incompatible("eu_log needs log utility".into()));
    };
    if s.config.strategy.rule != super::config::RuleConfig::Optimal {
        return Err(Error::Incompatible("eu_log needs the optimal rule".into()));
    }
    let x0 = s.x0();
    let pairs = s.map_paths(Measure::P, s.seed(), |p| {
        let t = s.run_path(p, false, None)?;
        Ok(((t.terminal + delta).ln(), (x0 + delta).ln() + 0.5 * t.information))
    })?;
    let lhs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let rhs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let l = McEstimate::from_samples("eu_log_mc", &lhs)?;
    let r = McEstimate::from_samples("eu_log_formula", &rhs)?;
    let d = McEstimate::paired("eu_log_gap", &lhs, &rhs)?;
    report.result("eu_log", [&l, &r, &d])?;
    Ok(vec![Check::statistical("eu_log", l.mean, r.mean, d.se, 3.0, 0.0)
        .with_detail("paired gap within 3 SE")])
}

/// `E U(X̃(T)) = X₀^{δ_u} G^{1/l} / δ_u` for the power-optimal strategy.
fn eu_power(s: &Scenario, report: &mut Report) -> Result<Vec<Check>> {
    if !s.is_power() || s.config.strategy.rule != super::config::RuleConfig::Optimal {
        return Err(Error::Incompatible("eu_power needs power utility and the optimal rule".into()));
    }
    let target = s.power_value()?;
    let u = s.map_paths(Measure::P, s.seed(), |p| {
        Ok(s.utility.utility(s.run_path(p, false, None)?.terminal))
    })?;
    let est = McEstimate::from_samples("eu_power_mc", &u)?;
    report.result("eu_power", &est)?;
    report.result("eu_power_formula", target)?;
    Ok(vec![Check::statistical("eu_power", est.mean, target, est.se, 3.0, 0.0)])
}

/// `E* ξ̂ = X₀`.
fn budget(s: &Scenario, report: &mut Report) -> Result<Vec<Check>> {
    let lambda = require_optimal_claim(s)?;
    let claims = s.map_paths(Measure::PStar, pstar_seed(s.seed()), |p| {
        let z = terminal_zbar(&density_trace(s, &s.grid, &s.vol, p, false)?)?;
        optimal_claim(&s.utility, lambda, z)
    })?;
    let est = McEstimate::from_samples("budget", &claims)?;
    report.result("budget", &est)?;
    Ok(vec![Check::statistical("budget", est.mean, s.x0(), est.se, 3.0, 0.0)
        .with_detail("E* xi = X0 within 3 SE")])
}

fn estimates_of(
    s: &Scenario,
    filter: &mut dyn DriftFilter<f64>,
    path: &SamplePath<f64>,
) -> Result<Vec<f64>> {
    Ok(run_filter(&s.spec, &s.grid, &s.vol, path, filter, true)?.estimates)
}

/// Largest gap and count of gaps above [`CE_GAP`] between the power and
/// Bayes estimates at `t_k`, `k < K`.
fn ce_gaps(
    s: &Scenario,
    power: &dyn Fn() -> Result<Box<dyn DriftFilter<f64>>>,
    bayes: &dyn Fn() -> Result<Box<dyn DriftFilter<f64>>>,
    path: &SamplePath<f64>,
) -> Result<(usize, usize, f64)> {
    let a = estimates_of(s, power()?.as_mut(), path)?;
    let b = estimates_of(s, bayes()?.as_mut(), path)?;
    let n = s.n();
    let points = a.len() / n - 1;
    let mut above = 0;
    let mut worst = 0.0f64;
    for k in 0..points {
        let gap = (0..n)
            .map(|i| (a[k * n + i] - b[k * n + i]).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
        above += usize::from(gap > CE_GAP);
    }
    Ok((above, points, worst))
}

/// The power-optimal equivalence filter is not the posterior mean, except
/// for a point-mass prior.
fn ce_failure(s: &Scenario, report: &mut Report) -> Result<Vec<Check>> {
    let Utility::Power { order } = s.utility else {
        return Err(Error::Incompatible("ce_failure needs power utility".into()));
    };
    let tilted = s.tilted.as_ref().ok_or(Error::MissingTiltedPrior)?;
    let power = || -> Result<Box<dyn DriftFilter<f64>>> { Ok(Box::new(tilted.filter()?)) };
    let bayes = || s.build_filter(FilterKind::Mixture);
    let counts = s.map_paths(Measure::P, s.seed(), |p| ce_gaps(s, &power, &bayes, p))?;
    let above: usize = counts.iter().map(|c| c.0).sum();
    let total: usize = counts.iter().map(|c| c.1).sum();
    let share = above as f64 / total as f64;

    let mean = s.spec.prior.initial_mean(s.n());
    let point = PriorSpec::Discrete(DiscretePrior {
        atoms: vec![VecFn::constant(mean)],
        probs: vec![1.0],
    });
    let q_path = s.vol.q_path().ok_or(Error::MissingTiltedPrior)?;
    let point_tilted = build_tilted_prior(&point, &q_path, &s.grid, order)?;
    let mut point_spec = s.spec.clone();
    point_spec.prior = point.clone();
    let point_power = || -> Result<Box<dyn DriftFilter<f64>>> { Ok(Box::new(point_tilted.filter()?)) };
    let point_bayes = || -> Result<Box<dyn DriftFilter<f64>>> {
        Ok(Box::new(crate::filters::MixtureFilter::from_prior(
            &point,
            point_spec.drift_map.clone(),
            1,
        )?))
    };
    let point_worst = s
        .map_paths(Measure::P, s.seed(), |p| ce_gaps(s, &point_power, &point_bayes, p))?
        .iter()
        .map(|c| c.2)
        .fold(0.0, f64::max);
    report.result("ce_failure_share", share)?;
    report.result("ce_point_mass_gap", point_worst)?;
    Ok(vec![
        Check::at_least("ce_failure", share, CE_SHARE)
            .with_detail("share of (path, t) points where the power and Bayes estimates differ by more than 1e-3"),
        Check::at_most("ce_point_mass", point_worst, CE_POINT_MASS)
            .with_detail("point-mass prior: largest gap between the two estimates"),
    ])
}

/// The filter's mean squared error at each sample time is below that of the
/// frozen prior mean and of zero by at least 2 SE.
fn min_variance(s: &Scenario, report: &mut Report) -> Result<Vec<Check>> {
    let steps = s.grid.steps();
    let times = &s.config.verify.sample_times;
    let indices: Vec<usize> = times.iter().map(|&t| s.grid.index_of(t)).collect();
    let frozen = s.spec.prior.initial_mean(s.n());
    let n = s.n();
    let rows = s.map_paths(Measure::P, s.seed(), |p| {
        let mut f = s.build_filter(s.filter_kind)?;
        let tr = run_filter(&s.spec, &s.grid, &s.vol, p, f.as_mut(), true)?;
        indices
            .iter()
            .map(|&k| {
                let truth = p
                    .drift_at(k.min(steps - 1))
                    .ok_or_else(|| Error::Incompatible("path carries no drift".into()))?;
                let sq = |e: &dyn Fn(usize) -> f64| -> f64 {
                    (0..n).map(|i| (truth[i] - e(i)).powi(2)).sum()
                };
                Ok([
                    sq(&|i| tr.estimate(k)[i]),
                    sq(&|i| frozen[i]),
                    sq(&|_| 0.0),
                ])
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut checks = Vec::new();
    let mut table = Vec::new();
    for (j, &t) in times.iter().enumerate() {
        let col = |c: usize| rows.iter().map(|r| r[j][c]).collect::<Vec<f64>>();
        let filt = col(0);
        let filter_mse = McEstimate::from_samples(format!("mse_filter_t{t}"), &filt)?;
        table.push(filter_mse.clone());
        for (c, name) in [(1, "frozen"), (2, "zero")] {
            let other = col(c);
            let d = McEstimate::paired(format!("mse_{name}_minus_filter_t{t}"), &other, &filt)?;
            checks.push(margin_check(
                &format!("min_variance_{name}_t{t}"),
                filter_mse.mean,
                filter_mse.mean + d.mean,
                &d,
            ));
            table.push(d);
        }
    }
    report.result("min_variance", &table)?;
    Ok(checks)
}

/// Passes when the paired difference `d = other - own` is at least `2·SE(d)`.
fn margin_check(name: &str, own: f64, other: f64, d: &McEstimate) -> Check {
    Check {
        name: name.into(),
        pass: d.mean >= 2.0 * d.se,
        lhs: own,
        rhs: other,
        se: Some(d.se),
        tolerance: 2.0 * d.se,
        detail: "paired margin of at least 2 SE".into(),
    }
}

#[derive(Serialize)]
struct Rival {
    rule: &'static str,
    expected_utility: McEstimate,
    margin: McEstimate,
}

fn trade_with(
    s: &Scenario,
    path: &SamplePath<f64>,
    rule: &StrategyRule<f64>,
    filter: Option<Box<dyn DriftFilter<f64>>>,
) -> Result<WealthTrace<f64>> {
    let mut filter = filter;
    trade(
        &s.spec,
        &s.grid,
        &s.vol,
        path,
        filter.as_mut().map(|f| &mut **f as &mut dyn DriftFilter<f64>),
        rule,
        s.tilted.as_ref(),
        false,
    )
}

/// The log-optimal strategy beats the zero strategy, the myopic strategy on
/// the frozen prior mean and the filter strategy scaled by two.
fn optimality(s: &Scenario, report: &mut Report) -> Result<Vec<Check>> {
    let Utility::Log { delta } = s.utility else {
        return Err(Error::Incompatible("optimality needs log utility".into()));
    };
    let frozen = s.spec.prior.initial_mean(s.n());
    let rivals: [(&str, StrategyRule<f64>, bool); 3] = [
        ("zero", StrategyRule::Zero, false),
        ("frozen_prior_mean", StrategyRule::Frozen { delta, estimate: frozen }, false),
        ("scaled_filter_2x", StrategyRule::Myopic { delta, scale: 2.0 }, true),
    ];
    let u = |x: f64| s.utility.utility(x);
    let rows = s.map_paths(Measure::P, s.seed(), |p| {
        let best = trade_with(s, p, &StrategyRule::Log { delta }, Some(s.build_filter(s.filter_kind)?))?;
        let mut row = vec![u(best.terminal)];
        for (_, rule, filtered) in &rivals {
            let f = if *filtered { Some(s.build_filter(s.filter_kind)?) } else { None };
            row.push(u(trade_with(s, p, rule, f)?.terminal));
        }
        Ok(row)
    })?;
    let col = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<f64>>();
    let best = col(0);
    let best_eu = McEstimate::from_samples("eu_log_optimal", &best)?;
    let mut checks = Vec::new();
    let mut table = Vec::new();
    for (j, (name, _, _)) in rivals.iter().enumerate() {
        let other = col(j + 1);
        let eu = McEstimate::from_samples(format!("eu_{name}"), &other)?;
        let d = McEstimate::paired(format!("margin_over_{name}"), &best, &other)?;
        checks.push(margin_check(&format!("optimality_vs_{name}"), eu.mean, best_eu.mean, &d));
        table.push(Rival {
            rule: name,
            expected_utility: eu,
            margin: d,
        });
    }
    report.result("optimal_expected_utility", &best_eu)?;
    report.result("rivals", &table)?;
    Ok(checks)
}

/// Kalman and grid-Bayes estimates agree along every path for a static
/// Gaussian prior.
fn kalman_grid(s: &Scenario, report: &mut Report) -> Result<Vec<Check>> {
    if !matches!(s.spec.prior, PriorSpec::GaussianStatic(_)) {
        return Err(Error::Incompatible("kalman_grid needs a static Gaussian prior".into()));
    }
    let sim = s.simulator(Measure::P)?;
    let worst = (0..s.paths().min(KALMAN_GRID_PATHS))
        .into_par_iter()
        .map(|i| {
            let p = sim.path(s.seed(), i)?;
            let a = estimates_of(s, s.build_filter(FilterKind::Kalman)?.as_mut(), &p)?;
            let b = estimates_of(s, s.build_filter(FilterKind::Mixture)?.as_mut(), &p)?;
            Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    report.result("kalman_grid_gap", worst)?;
    Ok(vec![Check::at_most("kalman_grid", worst, KALMAN_GRID_TOLERANCE)
        .with_detail("sup over paths and t of |a_kalman - a_grid|")])
}
