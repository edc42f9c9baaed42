use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MarkovEmbedding;
use crate::error::{Error, Result};
use crate::scalar::{from_usize, lit, to_f64, Real};

pub const GRID_MAGIC: &[u8; 4] = b"HDVF";
pub const GRID_VERSION: u32 = 1;
const MAX_DIM: usize = 3;

/// Finite-difference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    /// Nodes per dimension (at least 3 each).
    pub nodes: Vec<usize>,
    pub time_steps: usize,
    /// Explicit `(lower, upper)` per dimension; sized from the embedding when absent.
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Standard deviations of `y(T)` covered by the default domain.
    pub width: f64,
    /// Fully implicit steps taken first from `T` before Crank–Nicolson.
    pub smoothing_steps: usize,
    /// Grid each flagged coordinate uniformly in `ln y`; the embedding decides when absent.
    #[serde(default)]
    pub log_coordinates: Option<Vec<bool>>,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            nodes: vec![201],
            time_steps: 128,
            bounds: None,
            width: 6.0,
            smoothing_steps: 1,
            log_coordinates: None,
        }
    }
}

/// `V` on a uniform rectangular grid at every time level. Bounds and spacing
/// are in grid coordinates, which are `ln y` for dimensions flagged in `log_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridValue<T: Real> {
    pub log_scale: Vec<bool>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    pub nodes: Vec<usize>,
    pub spacing: Vec<T>,
    /// `t_0 = 0 < … < t_N = T`.
    pub times: Vec<T>,
    /// One slice per time, row-major with the last dimension fastest.
    pub values: Vec<Vec<T>>,
}

#[derive(Serialize, Deserialize)]
struct GridMeta {
    format_version: u32,
    data_file: String,
    dims: usize,
    nodes: Vec<usize>,
    log_scale: Vec<bool>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    spacing: Vec<f64>,
    times: Vec<f64>,
}

impl<T: Real> GridValue<T> {
    pub fn dims(&self) -> usize {
        self.nodes.len()
    }

    fn strides(&self) -> Vec<usize> {
        strides(&self.nodes)
    }

    /// State `y` at a grid node.
    pub fn node(&self, index: &[usize]) -> Vec<T> {
        index
            .iter()
            .enumerate()
            .map(|(d, &i)| {
                let x = self.lower[d] + self.spacing[d] * from_usize::<T>(i);
                if self.log_scale[d] {
                    x.exp()
                } else {
                    x
                }
            })
            .collect()
    }

    fn locate(&self, y: &[T], t: T) -> Result<(Vec<usize>, Vec<T>, usize, T)> {
        let out = || Error::OutOfDomain {
            point: y.iter().map(|v| to_f64(*v)).collect(),
            time: to_f64(t),
        };
        if y.len() != self.dims() {
            return Err(out());
        }
        let mut cell = Vec::with_capacity(y.len());
        let mut frac = Vec::with_capacity(y.len());
        for d in 0..self.dims() {
            let tol = self.spacing[d] * lit(1e-9);
            let yd = if self.log_scale[d] {
                if !(y[d] > T::zero()) {
                    return Err(out());
                }
                y[d].ln()
            } else {
                y[d]
            };
            if !(yd >= self.lower[d] - tol && yd <= self.upper[d] + tol) {
                return Err(out());
            }
            let x = to_f64((yd - self.lower[d]) / self.spacing[d]);
            let i = (x.floor().max(0.0) as usize).min(self.nodes[d] - 2);
            cell.push(i);
            frac.push(lit::<T>((x - i as f64).clamp(0.0, 1.0)));
        }
        let horizon = *self.times.last().unwrap();
        if !(t >= -horizon * lit(1e-12) && t <= horizon * (T::one() + lit(1e-12))) {
            return Err(out());
        }
        let steps = self.times.len() - 1;
        let s = to_f64(t / horizon) * steps as f64;
        let j = (s.floor().max(0.0) as usize).min(steps - 1);
        let w = lit::<T>((s - j as f64).clamp(0.0, 1.0));
        Ok((cell, frac, j, w))
    }

    fn corners(&self, cell: &[usize], frac: &[T]) -> Vec<(usize, Vec<usize>, T)> {
        let m = self.dims();
        (0..1usize << m)
            .map(|mask| {
                let mut idx = Vec::with_capacity(m);
                let mut w = T::one();
                for d in 0..m {
                    if mask >> d & 1 == 1 {
                        idx.push(cell[d] + 1);
                        w *= frac[d];
                    } else {
                        idx.push(cell[d]);
                        w *= T::one() - frac[d];
                    }
                }
                let flat = idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
                (flat, idx, w)
            })
            .collect()
    }

    /// Multilinear interpolation in `y`, linear in `t`.
    pub fn value(&self, y: &[T], t: T) -> Result<T> {
        let (cell, frac, j, w) = self.locate(y, t)?;
        let corners = self.corners(&cell, &frac);
        let at = |slice: &Vec<T>| {
            corners
                .iter()
                .fold(T::zero(), |acc, (f, _, c)| acc + slice[*f] * *c)
        };
        Ok(at(&self.values[j]) * (T::one() - w) + at(&self.values[j + 1]) * w)
    }

    fn node_gradient(&self, slice: &[T], idx: &[usize], d: usize) -> T {
        let stride = self.strides()[d];
        let flat: usize = idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        let h = self.spacing[d];
        let i = idx[d];
        if i == 0 {
            (slice[flat + stride] - slice[flat]) / h
        } else if i == self.nodes[d] - 1 {
            (slice[flat] - slice[flat - stride]) / h
        } else {
            (slice[flat + stride] - slice[flat - stride]) / (h + h)
        }
    }

    /// Central differences at the surrounding nodes, interpolated like `value`
    /// and mapped back to `∂V/∂y`.
    pub fn gradient(&self, y: &[T], t: T) -> Result<DVector<T>> {
        let (cell, frac, j, w) = self.locate(y, t)?;
        let corners = self.corners(&cell, &frac);
        let m = self.dims();
        Ok(DVector::from_fn(m, |d, _| {
            let at = |slice: &Vec<T>| {
                corners.iter().fold(T::zero(), |acc, (_, idx, c)| {
                    acc + self.node_gradient(slice, idx, d) * *c
                })
            };
            let g = at(&self.values[j]) * (T::one() - w) + at(&self.values[j + 1]) * w;
            if self.log_scale[d] {
                g / y[d]
            } else {
                g
            }
        }))
    }
}

fn strides(nodes: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; nodes.len()];
    for d in (0..nodes.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * nodes[d + 1];
    }
    s
}

fn unflatten(mut flat: usize, nodes: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; nodes.len()];
    for d in (0..nodes.len()).rev() {
        idx[d] = flat % nodes[d];
        flat /= nodes[d];
    }
    idx
}

/// Solves `∂V/∂t + f^T ∂V/∂y + ½ Tr(∂²V/∂y² b̄ b̄^T) = 0`, `V(·, T) = claim`,
/// backwards on a rectangle.
///
/// In a log coordinate `x = ln y` the generator becomes
/// `f/y - a/y²` for the drift and `a/(y_i y_j)` for the diffusion.
///
/// Each step applies the mixed-derivative terms explicitly, then one
/// tridiagonal solve per dimension (fully implicit for the first
/// `smoothing_steps` steps, Crank–Nicolson afterwards). Far-field nodes are
/// set by linear extrapolation.
pub fn solve_cauchy_fd<T: Real>(
    emb: &MarkovEmbedding<T>,
    claim: &(dyn Fn(&[T]) -> T + Sync),
    cfg: &FdConfig,
) -> Result<GridValue<T>> {
    let m = emb.dim;
    if m > MAX_DIM {
        return Err(Error::Incompatible(format!(
            "finite differences are limited to {MAX_DIM} dimensions, got {m}"
        )));
    }
    if cfg.nodes.len() != m || cfg.nodes.iter().any(|&k| k < 3) {
        return Err(Error::InvalidSpec(format!(
            "need at least 3 nodes in each of {m} dimensions"
        )));
    }
    if cfg.time_steps == 0 {
        return Err(Error::InvalidSpec("time_steps must be positive".into()));
    }
    let log_scale = cfg
        .log_coordinates
        .clone()
        .unwrap_or_else(|| emb.log_coordinates());
    if log_scale.len() != m {
        return Err(Error::InvalidSpec(format!(
            "log_coordinates needs {m} flags"
        )));
    }
    let bounds: Vec<(T, T)> = match &cfg.bounds {
        Some(b) => b.iter().map(|(l, u)| (lit(*l), lit(*u))).collect(),
        None => emb.default_bounds(lit(cfg.width))?,
    };
    if bounds.len() != m || bounds.iter().any(|(l, u)| !(u > l)) {
        return Err(Error::InvalidSpec(
            "bounds must give lower < upper in every dimension".into(),
        ));
    }
    if bounds
        .iter()
        .zip(&log_scale)
        .any(|((l, _), &log)| log && !(*l > T::zero()))
    {
        return Err(Error::InvalidSpec(
            "log coordinates need a positive lower bound".into(),
        ));
    }
    let bounds: Vec<(T, T)> = bounds
        .into_iter()
        .zip(&log_scale)
        .map(|((l, u), &log)| if log { (l.ln(), u.ln()) } else { (l, u) })
        .collect();
    let nodes = cfg.nodes.clone();
    let lower: Vec<T> = bounds.iter().map(|b| b.0).collect();
    let upper: Vec<T> = bounds.iter().map(|b| b.1).collect();
    let spacing: Vec<T> = (0..m)
        .map(|d| (upper[d] - lower[d]) / from_usize::<T>(nodes[d] - 1))
        .collect();
    let total: usize = nodes.iter().product();
    let stride = strides(&nodes);
    let horizon = emb.horizon;
    let dt = horizon / from_usize::<T>(cfg.time_steps);
    let times: Vec<T> = (0..=cfg.time_steps)
        .map(|k| {
            if k == cfg.time_steps {
                horizon
            } else {
                dt * from_usize::<T>(k)
            }
        })
        .collect();
    let points: Vec<T> = (0..total)
        .flat_map(|f| {
            unflatten(f, &nodes).into_iter().enumerate().map(|(d, i)| {
                let x = lower[d] + spacing[d] * from_usize::<T>(i);
                if log_scale[d] {
                    x.exp()
                } else {
                    x
                }
            })
        })
        .collect();
    let all_interior: Vec<bool> = (0..total)
        .map(|f| {
            unflatten(f, &nodes)
                .iter()
                .enumerate()
                .all(|(d, &i)| i > 0 && i < nodes[d] - 1)
        })
        .collect();
    let mut f_all = vec![T::zero(); total * m];
    let mut a_all = vec![T::zero(); total * m * m];

    let mut v: Vec<T> = points.par_chunks(m).map(claim).collect();
    let mut slices = vec![v.clone()];
    let deterministic = emb.has_deterministic_vol();
    let homogeneous = emb.is_time_homogeneous();
    let mut has_cross = false;
    let zero3 = (T::zero(), T::zero(), T::zero());
    let mut ops: Vec<Vec<(T, T, T)>> = (0..m).map(|_| vec![zero3; total]).collect();
    let line_starts: Vec<Vec<usize>> = (0..m)
        .map(|d| {
            (0..total)
                .filter(|f| unflatten(*f, &nodes)[d] == 0)
                .collect()
        })
        .collect();

    for step in (0..cfg.time_steps).rev() {
        let t_mid = (times[step] + times[step + 1]) * lit(0.5);
        let fresh = !homogeneous || step + 1 == cfg.time_steps;
        let shared_vol = if deterministic {
            Some(emb.local_vol(emb.y0.as_slice(), t_mid)?)
        } else {
            None
        };
        if fresh {
            f_all
                .par_chunks_mut(m)
                .zip(a_all.par_chunks_mut(m * m))
                .zip(points.par_chunks(m))
                .try_for_each_init(
                    || DMatrix::zeros(m, emb.n),
                    |scratch, ((f, a), y)| -> Result<()> {
                        match &shared_vol {
                            Some(l) => emb.generator_into(y, t_mid, l, f, a, scratch),
                            None => emb.generator_into(
                                y,
                                t_mid,
                                &emb.local_vol(y, t_mid)?,
                                f,
                                a,
                                scratch,
                            ),
                        }
                        for i in 0..m {
                            if log_scale[i] {
                                f[i] = f[i] / y[i] - a[i * m + i] / (y[i] * y[i]);
                                for j in 0..m {
                                    a[i * m + j] /= y[i];
                                    a[j * m + i] /= y[i];
                                }
                            }
                        }
                        Ok(())
                    },
                )?;
        }

        if fresh {
            for d in 0..m {
                let len = nodes[d];
                ops[d]
                    .par_chunks_mut(len)
                    .zip(line_starts[d].par_iter())
                    .for_each(|(line, &s)| {
                        for (k, op) in line.iter_mut().enumerate() {
                            let node = s + k * stride[d];
                            *op = operator(
                                f_all[node * m + d],
                                a_all[node * m * m + d * m + d],
                                spacing[d],
                            );
                        }
                    });
            }
            has_cross = m > 1
                && a_all
                    .chunks(m * m)
                    .any(|a| (0..m).any(|i| (0..m).any(|j| i != j && a[i * m + j] != T::zero())));
        }
        // explicit mixed derivatives
        if has_cross {
            let mut worst = 0.0f64;
            for (f, a) in a_all.chunks(m * m).enumerate() {
                if !all_interior[f] {
                    continue;
                }
                let mut s = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        if i != j {
                            s += to_f64(a[i * m + j].abs() / (spacing[i] * spacing[j]));
                        }
                    }
                }
                worst = worst.max(s);
            }
            let ratio = to_f64(dt) * worst;
            if ratio > 1.0 {
                return Err(Error::Stability {
                    ratio,
                    suggested_dt: 0.9 / worst,
                });
            }
            let updated: Vec<T> = (0..total)
                .into_par_iter()
                .map(|f| {
                    if !all_interior[f] {
                        return v[f];
                    }
                    let a = &a_all[f * m * m..(f + 1) * m * m];
                    let mut cross = T::zero();
                    for i in 0..m {
                        for j in i + 1..m {
                            let (si, sj) = (stride[i], stride[j]);
                            let mixed = (v[f + si + sj] - v[f + si - sj] - v[f - si + sj]
                                + v[f - si - sj])
                                / (spacing[i] * spacing[j] * lit(4.0));
                            cross += a[i * m + j] * lit(2.0) * mixed;
                        }
                    }
                    v[f] + dt * cross
                })
                .collect();
            v = updated;
        }

        let theta: T = if cfg.time_steps - 1 - step < cfg.smoothing_steps {
            T::one()
        } else {
            lit(0.5)
        };
        for d in 0..m {
            let len = nodes[d];
            let starts = &line_starts[d];
            let lines: Vec<Vec<T>> = starts
                .par_iter()
                .zip(ops[d].par_chunks(len))
                .map_init(
                    || Tridiagonal::new(len),
                    |work, (&s, line_ops)| {
                        let line: Vec<T> = (0..len).map(|k| v[s + k * stride[d]]).collect();
                        work.sweep(&line, line_ops, dt, theta)
                    },
                )
                .collect();
            for (s, line) in starts.iter().zip(lines) {
                for (k, val) in line.into_iter().enumerate() {
                    v[s + k * stride[d]] = val;
                }
            }
        }
        slices.push(v.clone());
    }
    slices.reverse();
    Ok(GridValue {
        log_scale,
        lower,
        upper,
        nodes,
        spacing,
        times,
        values: slices,
    })
}

/// Stencil `(lower, diagonal, upper)` of `f ∂ + a ∂²` at one node; central
/// differences unless the drift dominates, then upwind.
fn operator<T: Real>(f: T, a: T, h: T) -> (T, T, T) {
    let h2 = h * h;
    if f.abs() * h <= a + a {
        let c = f / (h + h);
        (a / h2 - c, -(a + a) / h2, a / h2 + c)
    } else if f > T::zero() {
        (a / h2, -(a + a) / h2 - f / h, a / h2 + f / h)
    } else {
        (a / h2 - f / h, -(a + a) / h2 + f / h, a / h2)
    }
}

/// Work buffers for one line solve.
struct Tridiagonal<T: Real> {
    rhs: Vec<T>,
    sub: Vec<T>,
    diag: Vec<T>,
    sup: Vec<T>,
    c: Vec<T>,
    d: Vec<T>,
}

impl<T: Real> Tridiagonal<T> {
    fn new(len: usize) -> Self {
        let inner = len - 2;
        let z = vec![T::zero(); inner];
        Self {
            rhs: z.clone(),
            sub: z.clone(),
            diag: z.clone(),
            sup: z.clone(),
            c: z.clone(),
            d: z,
        }
    }

    /// `(I - θ dt L) u = (I + (1-θ) dt L) v` on the interior nodes with
    /// `u_0 = 2u_1 - u_2`, `u_N = 2u_{N-1} - u_{N-2}`.
    fn sweep(&mut self, v: &[T], ops: &[(T, T, T)], dt: T, theta: T) -> Vec<T> {
        let len = v.len();
        let inner = len - 2;
        let explicit = (T::one() - theta) * dt;
        let implicit = theta * dt;
        let Self {
            rhs,
            sub,
            diag,
            sup,
            c,
            d,
        } = self;
        for r in 0..inner {
            let k = r + 1;
            let (lo, di, up) = ops[k];
            rhs[r] = v[k] + explicit * (lo * v[k - 1] + di * v[k] + up * v[k + 1]);
            sub[r] = -implicit * lo;
            diag[r] = T::one() - implicit * di;
            sup[r] = -implicit * up;
        }
        // fold the extrapolated far-field values into the first and last rows
        if inner == 1 {
            // one interior node: extrapolation makes the line constant
            let (lo, di, up) = ops[1];
            let u = rhs[0] / (T::one() - implicit * (lo + di + up));
            return vec![u; len];
        }
        diag[0] += sub[0] + sub[0];
        sup[0] -= sub[0];
        let last = inner - 1;
        diag[last] += sup[last] + sup[last];
        sub[last] -= sup[last];

        // Thomas algorithm
        c[0] = sup[0] / diag[0];
        d[0] = rhs[0] / diag[0];
        for r in 1..inner {
            let inv = T::one() / (diag[r] - sub[r] * c[r - 1]);
            c[r] = sup[r] * inv;
            d[r] = (rhs[r] - sub[r] * d[r - 1]) * inv;
        }
        let mut out = vec![T::zero(); len];
        out[inner] = d[last];
        for r in (0..last).rev() {
            out[r + 1] = d[r] - c[r] * out[r + 2];
        }
        out[0] = out[1] + out[1] - out[2];
        out[len - 1] = out[len - 2] + out[len - 2] - out[len - 3];
        out
    }
}

/// Writes `<stem>.bin` (magic, version, shape, little-endian values) and
/// `<stem>.json` (log flags, bounds, spacing, times).
pub fn write_grid<T: Real>(value: &GridValue<T>, dir: &Path, stem: &str) -> Result<()> {
    let bin = format!("{stem}.bin");
    let mut w = BufWriter::new(File::create(dir.join(&bin))?);
    w.write_all(GRID_MAGIC)?;
    w.write_all(&GRID_VERSION.to_le_bytes())?;
    w.write_all(&(value.dims() as u32).to_le_bytes())?;
    for &k in &value.nodes {
        w.write_all(&(k as u64).to_le_bytes())?;
    }
    w.write_all(&(value.times.len() as u64).to_le_bytes())?;
    for slice in &value.values {
        for x in slice {
            w.write_all(&to_f64(*x).to_le_bytes())?;
        }
    }
    w.flush()?;
    let meta = GridMeta {
        format_version: GRID_VERSION,
        data_file: bin,
        dims: value.dims(),
        nodes: value.nodes.clone(),
        log_scale: value.log_scale.clone(),
        lower: value.lower.iter().map(|x| to_f64(*x)).collect(),
        upper: value.upper.iter().map(|x| to_f64(*x)).collect(),
        spacing: value.spacing.iter().map(|x| to_f64(*x)).collect(),
        times: value.times.iter().map(|x| to_f64(*x)).collect(),
    };
    let mut j = File::create(dir.join(format!("{stem}.json")))?;
    serde_json::to_writer_pretty(&mut j, &meta)?;
    j.write_all(b"\n")?;
    Ok(())
}

/// Reads a grid written by [`write_grid`].
pub fn read_grid(dir: &Path, stem: &str) -> Result<GridValue<f64>> {
    let meta: GridMeta = serde_json::from_reader(File::open(dir.join(format!("{stem}.json")))?)?;
    let mut r = BufReader::new(File::open(dir.join(&meta.data_file))?);
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != GRID_MAGIC {
        return Err(Error::Cache("not a value-function grid".into()));
    }
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != GRID_VERSION {
        return Err(Error::Cache(format!(
            "grid version {version}, expected {GRID_VERSION}"
        )));
    }
    r.read_exact(&mut word)?;
    let dims = u32::from_le_bytes(word) as usize;
    let mut long = [0u8; 8];
    let mut nodes = Vec::with_capacity(dims);
    for _ in 0..dims {
        r.read_exact(&mut long)?;
        nodes.push(u64::from_le_bytes(long) as usize);
    }
    r.read_exact(&mut long)?;
    let slices = u64::from_le_bytes(long) as usize;
    if nodes != meta.nodes || slices != meta.times.len() {
        return Err(Error::Cache("grid data and metadata disagree".into()));
    }
    let total: usize = nodes.iter().product();
    let mut values = Vec::with_capacity(slices);
    for _ in 0..slices {
        let mut slice = Vec::with_capacity(total);
        for _ in 0..total {
            r.read_exact(&mut long)?;
            slice.push(f64::from_le_bytes(long));
        }
        values.push(slice);
    }
    Ok(GridValue {
        log_scale: meta.log_scale,
        lower: meta.lower,
        upper: meta.upper,
        nodes,
        spacing: meta.spacing,
        times: meta.times,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::AffineVol;
    use crate::market::LocalVol;
    use nalgebra::dvector;
    use std::sync::Arc;

    fn heat(sigma: f64) -> MarkovEmbedding<f64> {
        MarkovEmbedding::custom(
            dvector![0.0],
            1,
            1.0,
            Arc::new(AffineVol::scalar(sigma)),
            Arc::new(|_: &[f64], _, out: &mut [f64]| out[0] = 0.0),
            Arc::new(|_: &[f64], _, _: &LocalVol<f64>, out: &mut DMatrix<f64>| out[(0, 0)] = 1.0),
            Arc::new(|y: &[f64]| y[0]),
        )
    }

    #[test]
    fn constant_claim_stays_constant() {
        let cfg = FdConfig {
            nodes: vec![41],
            time_steps: 20,
            bounds: Some(vec![(-2.0, 2.0)]),
            ..FdConfig::default()
        };
        let v = solve_cauchy_fd(&heat(0.5), &|_: &[f64]| 3.0, &cfg).unwrap();
        assert!(v.values.iter().flatten().all(|x| (x - 3.0).abs() < 1e-13));
    }

    #[test]
    fn terminal_slice_is_the_claim() {
        let cfg = FdConfig {
            nodes: vec![21],
            time_steps: 10,
            bounds: Some(vec![(-2.0, 2.0)]),
            ..FdConfig::default()
        };
        let claim = |y: &[f64]| (-y[0] * y[0]).exp();
        let v = solve_cauchy_fd(&heat(0.5), &claim, &cfg).unwrap();
        for (i, x) in v.values.last().unwrap().iter().enumerate() {
            assert_eq!(*x, claim(&v.node(&[i])));
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let g = GridValue {
            log_scale: vec![false],
            lower: vec![0.0],
            upper: vec![2.0],
            nodes: vec![5],
            spacing: vec![0.5],
            times: vec![0.0, 1.0],
            values: vec![(0..5).map(|i| (i as f64 * 0.5).powi(2)).collect(); 2],
        };
        assert!((g.gradient(&[0.8], 0.3).unwrap()[0] - 1.6).abs() < 1e-12);
        assert!(matches!(
            g.value(&[2.5], 0.3),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn grid_round_trips_through_files() {
        let cfg = FdConfig {
            nodes: vec![11],
            time_steps: 4,
            bounds: Some(vec![(-1.0, 1.0)]),
            ..FdConfig::default()
        };
        let v = solve_cauchy_fd(&heat(0.3), &|y: &[f64]| y[0] * y[0], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_grid(&v, dir.path(), "value").unwrap();
        assert_eq!(read_grid(dir.path(), "value").unwrap(), v);
    }
}
