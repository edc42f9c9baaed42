use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::ValueMethod;
use super::mc::McEstimate;
use super::scenario::{file_name, Check, ErrorSummary, Report, Scenario};
use super::table::{write_table, Format};
use crate::error::{Error, Result};
use crate::market::{Measure, TimeGrid};
use crate::pde::{
    feynman_kac_value, replicate, solve_cauchy_fd, terminal_claim, write_grid, FdConfig,
    FkOptions, FkValue, MarkovEmbedding, ValueFunction,
};
use crate::strategies::{optimal_claim, write_wealth_csv, WealthTrace};

/// Seed of the inner Feynman–Kac sample.
pub fn fk_seed(seed: u64) -> u64 {
    seed ^ 0xbf58_476d_1ce4_e5b9
}

/// Mean replication error at one time step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Level {
    pub factor: usize,
    pub dt: f64,
    pub error: McEstimate,
}

/// The value function of the configured embedding and claim.
pub fn value_function(s: &Scenario, emb: &MarkovEmbedding<f64>, lambda: f64) -> Result<ValueFunction<f64>> {
    let r = &s.config.replicate;
    let claim = terminal_claim(emb, &s.utility, lambda);
    Ok(match r.method {
        ValueMethod::Fd => {
            let cfg = FdConfig {
                nodes: r.nodes.clone().unwrap_or_else(|| vec![201; emb.dim]),
                time_steps: r.time_steps,
                bounds: r.bounds.clone(),
                width: r.width,
                ..FdConfig::default()
            };
            ValueFunction::Grid(solve_cauchy_fd(emb, claim.as_ref(), &cfg)?)
        }
        ValueMethod::Fk => ValueFunction::MonteCarlo(FkValue {
            embedding: emb.clone(),
            claim,
            options: FkOptions {
                n_inner: r.fk_inner,
                seed: fk_seed(s.seed()),
                steps: r.fk_steps,
            },
        }),
    })
}

/// Replicates `ξ̂` on `P` paths with `π = B L^T ∂V/∂y` and reports
/// `|X̃(T) - ξ̂|`.
pub fn run_replicate(s: &Scenario, out: Option<&Path>, format: Format) -> Result<Report> {
    let mut report = Report::new("replicate", s);
    let r = &s.config.replicate;
    let emb = MarkovEmbedding::build(&s.spec, r.embedding, &s.grid)?;
    let lambda = s.lambda()?;
    let value = value_function(s, &emb, lambda)?;
    let y0: Vec<f64> = emb.y0.iter().copied().collect();
    let v0 = value.value(&y0, 0.0)?;
    report.result("lambda_hat", lambda)?;
    report.result("embedding", r.embedding)?;
    report.result("dimension", emb.dim)?;
    report.result("value_at_start", v0)?;

    if r.check_fk && r.method == ValueMethod::Fd {
        let claim = terminal_claim(&emb, &s.utility, lambda);
        let opts = FkOptions {
            n_inner: r.fk_inner,
            seed: fk_seed(s.seed()),
            steps: r.fk_steps,
        };
        let fk = feynman_kac_value(&emb, claim.as_ref(), &y0, 0.0, opts)?;
        report.check(
            Check::statistical("fd_vs_fk", v0, fk.mean, fk.se, 3.0, 1e-3)
                .with_detail("FD value at y0 vs Feynman-Kac mean, 3 SE + 1e-3"),
        );
        report.result("feynman_kac_value", &fk)?;
    }

    let x0 = s.x0();
    let levels = if r.refinements.is_empty() {
        vec![1]
    } else {
        r.refinements.clone()
    };
    if levels.windows(2).any(|w| w[0] >= w[1]) || levels[0] == 0 {
        return Err(Error::Config(
            "replicate.refinements must be increasing and positive".into(),
        ));
    }
    let sim = s.simulator(Measure::P)?;
    let grids: Vec<TimeGrid<f64>> = levels.iter().map(|&f| s.grid.refine(f)).collect();
    let vols = grids
        .iter()
        .map(|g| s.spec.vol_field(g))
        .collect::<Result<Vec<_>>>()?;
    let record = |i: usize| out.is_some() && i < s.config.outputs.traced_paths;
    let per_path: Vec<Vec<WealthTrace<f64>>> = (0..s.paths())
        .into_par_iter()
        .map(|i| {
            let paths = if levels == [1] {
                vec![sim.path(s.seed(), i)?]
            } else {
                sim.coupled(s.seed(), i, &levels)?
            };
            paths
                .iter()
                .zip(grids.iter().zip(&vols))
                .enumerate()
                .map(|(l, (p, (g, v)))| {
                    let mut tr = replicate(&s.spec, g, v, &emb, &value, p, record(i) && l == 0)?;
                    let zbar = tr.log_zbar.map_or(f64::NAN, f64::exp);
                    tr.claim = Some(optimal_claim(&s.utility, lambda, zbar)?);
                    Ok(tr)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut table = Vec::new();
    for (l, &factor) in levels.iter().enumerate() {
        let errors: Vec<f64> = per_path
            .iter()
            .map(|t| t[l].replication_error().unwrap_or(f64::NAN))
            .collect();
        table.push(Level {
            factor,
            dt: grids[l].dt(),
            error: McEstimate::from_samples(format!("replication_error_{factor}"), &errors)?,
        });
        if l == 0 {
            report.result("replication_error", ErrorSummary::new(&errors))?;
            let mean = table[0].error.mean;
            report.check(
                Check::at_most("replication_error", mean, r.tolerance * x0)
                    .with_detail("mean |X(T) - xi| <= tolerance * X0"),
            );
        }
    }
    for w in table.windows(2) {
        report.check(
            Check::at_most(
                &format!("refinement_{}_to_{}", w[0].factor, w[1].factor),
                w[1].error.mean,
                w[0].error.mean,
            )
            .with_detail("mean replication error decreases as dt is refined"),
        );
    }
    report.result("levels", &table)?;

    if let Some(dir) = out {
        if let (true, ValueFunction::Grid(g)) = (s.config.outputs.grid, &value) {
            write_grid(g, dir, "value_grid")?;
            report.artifacts.push("value_grid.bin".into());
            report.artifacts.push("value_grid.json".into());
        }
        if s.config.outputs.wealth {
            let recorded: Vec<WealthTrace<f64>> = per_path
                .into_iter()
                .map(|mut t| t.swap_remove(0))
                .filter(|t| !t.normalized.is_empty())
                .collect();
            let p = write_table(dir, "replication_wealth", format, |buf| {
                write_wealth_csv(&recorded, &grids[0], s.n(), buf)
            })?;
            report.artifacts.push(file_name(&p));
        }
        report.write(dir)?;
    }
    Ok(report)
}
