use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::filters::DriftFilter;
use crate::market::{MarketSpec, PathPrefix, SamplePath, TimeGrid, VolField};
use crate::market::fmt;

/// A filter run along one path: `â(t_k)` and the filter state at every grid
/// time `k = 0..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterTrace {
    pub path: usize,
    pub variant: &'static str,
    pub n: usize,
    /// `â(t_k)`, flattened, `n` per time.
    pub estimates: Vec<f64>,
    /// Posterior weights, Gaussian mean and covariance, or simplex probabilities.
    pub states: Vec<Vec<f64>>,
    /// `log Z̄(t_k)` when the filter carries it.
    pub log_zbar: Vec<Option<f64>>,
    /// `Q(t_k)` for `k < K`.
    pub q: Vec<DMatrix<f64>>,
}

impl FilterTrace {
    pub fn estimate(&self, k: usize) -> &[f64] {
        &self.estimates[k * self.n..(k + 1) * self.n]
    }

    pub fn terminal_log_zbar(&self) -> Option<f64> {
        self.log_zbar.last().copied().flatten()
    }
}

/// Runs `filter` along `path`. With `record == false` only the terminal
/// values are kept.
pub fn run_filter(
    spec: &MarketSpec<f64>,
    grid: &TimeGrid<f64>,
    vol: &VolField<f64>,
    path: &SamplePath<f64>,
    filter: &mut dyn DriftFilter<f64>,
    record: bool,
) -> Result<FilterTrace> {
    let n = spec.n_stocks;
    let steps = grid.steps();
    if path.steps() != steps || path.n != n {
        return Err(Error::GridMismatch("path does not match the grid".into()));
    }
    let dt = grid.dt();
    let mut estimates = Vec::new();
    let mut states = Vec::new();
    let mut log_zbar = Vec::new();
    let mut q = Vec::new();
    let mut d_r = vec![0.0; n];
    for k in 0..steps {
        let current = path.excess_at(k);
        let local = vol.at(path.index, k, grid.time(k), PathPrefix::new(n, path.excess_prefix(k)))?;
        if record {
            let s = filter.state(current);
            estimates.extend_from_slice(s.estimate.as_slice());
            states.push(s.posterior.values());
            log_zbar.push(filter.log_density());
            q.push(local.q.clone());
        }
        path.increment_into(k, &mut d_r);
        filter.advance(current, &local, &d_r, dt)?;
    }
    let s = filter.state(path.excess_at(steps));
    estimates.extend_from_slice(s.estimate.as_slice());
    states.push(s.posterior.values());
    log_zbar.push(filter.log_density());
    Ok(FilterTrace {
        path: path.index,
        variant: filter.variant(),
        n,
        estimates,
        states,
        log_zbar,
        q,
    })
}

/// Columns `path,t,variant,zbar,a_hat_1..n,state_1..m`; `zbar` is blank when
/// the filter does not carry the mixture density.
pub fn write_filter_csv<W: Write>(traces: &[FilterTrace], grid: &TimeGrid<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = traces.iter().find(|t| t.states.len() == grid.steps() + 1) else {
        w.write_record(["path", "t", "variant", "zbar"])?;
        w.flush()?;
        return Ok(());
    };
    let n = first.n;
    let m = first.states[0].len();
    let mut header = vec!["path".to_string(), "t".into(), "variant".into(), "zbar".into()];
    header.extend((1..=n).map(|i| format!("a_hat_{i}")));
    header.extend((1..=m).map(|j| format!("state_{j}")));
    w.write_record(&header)?;
    for tr in traces.iter().filter(|t| t.states.len() == grid.steps() + 1) {
        for k in 0..=grid.steps() {
            let mut row = vec![
                tr.path.to_string(),
                fmt(grid.time(k)),
                tr.variant.to_string(),
                tr.log_zbar[k].map(|l| fmt(l.exp())).unwrap_or_default(),
            ];
            row.extend(tr.estimate(k).iter().map(|v| fmt(*v)));
            row.extend(tr.states[k].iter().map(|v| fmt(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Columns `t,gamma_11,gamma_12,…` (row-major) for `γ(t_k)`, `k = 0..=K`.
pub fn write_riccati_csv<W: Write>(gammas: &[DMatrix<f64>], grid: &TimeGrid<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = gammas.first().map_or(0, |g| g.nrows());
    let mut header = vec!["t".to_string()];
    for i in 1..=n {
        for j in 1..=n {
            header.push(format!("gamma_{i}{j}"));
        }
    }
    w.write_record(&header)?;
    for (k, g) in gammas.iter().enumerate() {
        let mut row = vec![fmt(grid.time(k))];
        for i in 0..n {
            for j in 0..n {
                row.push(fmt(g[(i, j)]));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
