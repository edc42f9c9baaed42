use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{ErrorMetric, RuleConfig, Study};
use super::mc::McEstimate;
use super::scenario::{file_name, pstar_seed, Check, Report, Scenario};
use super::table::{write_table, Format};
use super::trace::run_filter;
use crate::error::{Error, Result};
use crate::filters::DriftFilter;
use crate::likelihood::zbar_exponential;
use crate::market::{fmt, Measure, SamplePath, TimeGrid, VolField};
use crate::strategies::{optimal_claim, trade, StrategyRule, Utility};

/// Error of one refinement level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub factor: usize,
    pub dt: f64,
    pub error: f64,
    pub se: f64,
    /// `log₂(error_prev / error)`; absent on the coarsest level.
    pub ratio_log2: Option<f64>,
}

/// Least-squares slope of `ln error` against `ln dt`.
pub fn fitted_order(rows: &[ConvergenceRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.error > 0.0)
        .map(|r| (r.dt.ln(), r.error.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

struct Level {
    grid: TimeGrid<f64>,
    vol: VolField<f64>,
}

fn filtered_trade(
    s: &Scenario,
    level: &Level,
    path: &SamplePath<f64>,
    rule: &StrategyRule<f64>,
    filter: Option<Box<dyn DriftFilter<f64>>>,
) -> Result<f64> {
    let mut filter = filter;
    Ok(trade(
        &s.spec,
        &level.grid,
        &level.vol,
        path,
        filter.as_mut().map(|f| &mut **f as &mut dyn DriftFilter<f64>),
        rule,
        None,
        false,
    )?
    .terminal)
}

/// Signed error of the study on one path at one level.
fn path_error(s: &Scenario, study: Study, level: &Level, path: &SamplePath<f64>) -> Result<f64> {
    match study {
        Study::LogReplication => {
            let Utility::Log { delta } = s.utility else {
                unreachable!("checked before the run")
            };
            let x = filtered_trade(
                s,
                level,
                path,
                &StrategyRule::Log { delta },
                Some(s.build_filter(s.filter_kind)?),
            )?;
            let mut f = s.density_filter()?;
            let tr = run_filter(&s.spec, &level.grid, &level.vol, path, f.as_mut(), false)?;
            let zbar = tr.terminal_log_zbar().map_or(f64::NAN, f64::exp);
            Ok(x - optimal_claim(&s.utility, 1.0 / (s.x0() + delta), zbar)?)
        }
        Study::ZbarForms => {
            let mut f = s.density_filter()?;
            let tr = run_filter(&s.spec, &level.grid, &level.vol, path, f.as_mut(), true)?;
            let mix = tr.terminal_log_zbar().map_or(f64::NAN, f64::exp);
            let exp = zbar_exponential(&tr.estimates, &tr.q, &path.excess, s.n(), level.grid.dt())?;
            Ok((mix - exp[exp.len() - 1]) / mix)
        }
        Study::Zero => Ok(filtered_trade(s, level, path, &StrategyRule::Zero, None)? - s.x0()),
    }
}

/// Errors on coupled paths at each refinement of `grid.dt` and the fitted
/// order. The `zero` study must be exact at every level.
pub fn run_converge(s: &Scenario, out: Option<&Path>, format: Format) -> Result<Report> {
    let mut report = Report::new("converge", s);
    let c = &s.config.converge;
    if c.refinements.len() < 2 || c.refinements.windows(2).any(|w| w[0] >= w[1]) || c.refinements[0] == 0 {
        return Err(Error::Config(
            "converge.refinements needs at least two increasing positive factors".into(),
        ));
    }
    if c.study == Study::LogReplication
        && (!matches!(s.utility, Utility::Log { .. }) || s.config.strategy.rule != RuleConfig::Optimal)
    {
        return Err(Error::Incompatible(
            "log_replication needs log utility and the optimal rule".into(),
        ));
    }
    let levels = c
        .refinements
        .iter()
        .map(|&f| {
            let grid = s.grid.refine(f);
            Ok(Level {
                vol: s.spec.vol_field(&grid)?,
                grid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (measure, seed) = match c.study {
        Study::ZbarForms => (Measure::PStar, pstar_seed(s.seed())),
        _ => (Measure::P, s.seed()),
    };
    let sim = s.simulator(measure)?;
    let errors: Vec<Vec<f64>> = (0..s.paths())
        .into_par_iter()
        .map(|i| {
            sim.coupled(seed, i, &c.refinements)?
                .iter()
                .zip(&levels)
                .map(|(p, l)| path_error(s, c.study, l, p))
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for (j, (&factor, level)) in c.refinements.iter().zip(&levels).enumerate() {
        let col: Vec<f64> = errors.iter().map(|e| e[j]).collect();
        let (error, se) = match c.metric {
            ErrorMetric::Strong => {
                let abs: Vec<f64> = col.iter().map(|e| e.abs()).collect();
                let est = McEstimate::from_samples("strong", &abs)?;
                (est.mean, est.se)
            }
            ErrorMetric::Weak => {
                let est = McEstimate::from_samples("weak", &col)?;
                (est.mean.abs(), est.se)
            }
        };
        let ratio_log2 = rows.last().map(|prev| (prev.error / error).log2());
        rows.push(ConvergenceRow {
            factor,
            dt: level.grid.dt(),
            error,
            se,
            ratio_log2,
        });
    }
    report.result("study", c.study)?;
    report.result("metric", c.metric)?;
    report.result("levels", &rows)?;

    if c.study == Study::Zero {
        let worst = errors.iter().flatten().map(|e| e.abs()).fold(0.0, f64::max);
        report.check(Check::deterministic("zero_strategy_exact", worst, 0.0, 0.0));
    } else {
        let order = fitted_order(&rows).unwrap_or(f64::NAN);
        report.result("order", order)?;
        let (lo, hi) = c.expected_order;
        report.check(Check {
            name: "order".into(),
            pass: (lo..=hi).contains(&order),
            lhs: order,
            rhs: 0.5 * (lo + hi),
            se: None,
            tolerance: 0.5 * (hi - lo),
            detail: format!("fitted order in [{lo}, {hi}]"),
        });
    }

    if let Some(dir) = out {
        let p = write_table(dir, "convergence", format, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["factor", "dt", "error", "se", "ratio_log2"])?;
            for r in &rows {
                w.write_record([
                    r.factor.to_string(),
                    fmt(r.dt),
                    fmt(r.error),
                    fmt(r.se),
                    r.ratio_log2.map(fmt).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            Ok(())
        })?;
        report.artifacts.push(file_name(&p));
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dt: f64, error: f64) -> ConvergenceRow {
        ConvergenceRow {
            factor: 1,
            dt,
            error,
            se: 0.0,
            ratio_log2: None,
        }
    }

    #[test]
    fn order_of_an_exact_power_law() {
        let rows: Vec<_> = (0..4)
            .map(|k| {
                let dt = 0.1 / 2f64.powi(k);
                row(dt, 3.0 * dt.powf(1.5))
            })
            .collect();
        assert!((fitted_order(&rows).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_errors_give_no_order() {
        assert_eq!(fitted_order(&[row(0.1, 0.0), row(0.05, 0.0)]), None);
    }
}
