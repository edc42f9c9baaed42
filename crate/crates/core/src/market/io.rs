//! Path export: one CSV row per (path, time), and a compact little-endian
//! binary cache with a magic/version header.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::market::bundle::{Measure, PathBundle, SamplePath};
use crate::market::model::TimeGrid;
use crate::market::prior::ParamDraw;
use crate::scalar::{lit, to_f64, Real};

pub const CACHE_MAGIC: [u8; 4] = *b"HDPB";
pub const CACHE_VERSION: u32 = 1;

pub fn write_paths_csv<T: Real, W: Write>(bundle: &PathBundle<T>, out: W) -> Result<()> {
    let n = bundle.n_stocks;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((0..n).map(|i| format!("excess_{i}")));
    header.push("rate".into());
    header.extend((0..n).map(|i| format!("dw_{i}")));
    header.extend((0..n).map(|i| format!("drift_{i}")));
    w.write_record(&header)?;
    for path in &bundle.paths {
        for k in 0..=path.steps() {
            let mut row = vec![path.index.to_string(), fmt(bundle.grid.time(k))];
            row.extend(path.excess_at(k).iter().map(|v| fmt(*v)));
            row.push(fmt(path.rates[k]));
            let last = k == path.steps();
            row.extend((0..n).map(|i| {
                if last {
                    String::new()
                } else {
                    fmt(path.dw[k * n + i])
                }
            }));
            row.extend(
                (0..n).map(|i| match path.drift_at(k.min(path.steps() - 1)) {
                    Some(d) if !last => fmt(d[i]),
                    _ => String::new(),
                }),
            );
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that round-trips the double.
pub(crate) fn fmt<T: Real>(v: T) -> String {
    format!("{:?}", to_f64(v))
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s<T: Real, W: Write>(w: &mut W, vs: &[T]) -> Result<()> {
    for v in vs {
        w.write_all(&to_f64(*v).to_le_bytes())?;
    }
    Ok(())
}

/// Layout (all little endian): magic, version u32, n u32, steps u64,
/// n_paths u64, horizon f64, measure u8, seed u64; then per path: index u64,
/// atom i64 (-1 when not a discrete draw), has_drift u8, excess, rates, dw,
/// drift (if present), all as f64. Only discrete parameter draws survive.
pub fn write_cache<T: Real, W: Write>(bundle: &PathBundle<T>, mut w: W) -> Result<()> {
    w.write_all(&CACHE_MAGIC)?;
    put_u32(&mut w, CACHE_VERSION)?;
    put_u32(&mut w, bundle.n_stocks as u32)?;
    put_u64(&mut w, bundle.grid.steps() as u64)?;
    put_u64(&mut w, bundle.paths.len() as u64)?;
    w.write_all(&to_f64(bundle.grid.horizon()).to_le_bytes())?;
    w.write_all(&[matches!(bundle.measure, Measure::PStar) as u8])?;
    put_u64(&mut w, bundle.seed)?;
    for p in &bundle.paths {
        put_u64(&mut w, p.index as u64)?;
        let atom = match p.param {
            Some(ParamDraw::Atom(i)) => i as i64,
            _ => -1,
        };
        w.write_all(&atom.to_le_bytes())?;
        w.write_all(&[p.drift.is_some() as u8])?;
        put_f64s(&mut w, &p.excess)?;
        put_f64s(&mut w, &p.rates)?;
        put_f64s(&mut w, &p.dw)?;
        if let Some(d) = &p.drift {
            put_f64s(&mut w, d)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Cache(format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn vec<T: Real>(&mut self, len: usize) -> Result<Vec<T>> {
        (0..len).map(|_| self.f64().map(lit)).collect()
    }
}

pub fn read_cache<T: Real, R: Read>(inner: R) -> Result<PathBundle<T>> {
    let mut r = Reader { inner };
    if r.bytes::<4>()? != CACHE_MAGIC {
        return Err(Error::Cache("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let steps = r.u64()? as usize;
    let n_paths = r.u64()? as usize;
    let horizon = r.f64()?;
    let measure = match r.bytes::<1>()?[0] {
        0 => Measure::P,
        1 => Measure::PStar,
        other => return Err(Error::Cache(format!("bad measure tag {other}"))),
    };
    let seed = r.u64()?;
    let grid = TimeGrid::with_steps(lit(horizon), steps)?;
    let mut paths = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let index = r.u64()? as usize;
        let atom = i64::from_le_bytes(r.bytes()?);
        let has_drift = r.bytes::<1>()?[0] != 0;
        let excess = r.vec((steps + 1) * n)?;
        let rates = r.vec(steps + 1)?;
        let dw = r.vec(steps * n)?;
        let drift = if has_drift {
            Some(r.vec(steps * n)?)
        } else {
            None
        };
        paths.push(SamplePath {
            index,
            n,
            excess,
            rates,
            dw,
            drift,
            param: (atom >= 0).then_some(ParamDraw::Atom(atom as usize)),
        });
    }
    Ok(PathBundle {
        grid,
        measure,
        seed,
        n_stocks: n,
        paths,
    })
}
