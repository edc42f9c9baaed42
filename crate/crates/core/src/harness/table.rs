use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::Result;

/// Encoding of tabular outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Renders a CSV produced by `fill` as `{"columns": [...], "rows": [[...]]}`.
/// Numeric cells become JSON numbers with the same digits, blanks become null.
pub fn csv_to_json(csv_bytes: &[u8]) -> Result<Value> {
    let mut r = csv::Reader::from_reader(csv_bytes);
    let columns: Vec<Value> = r
        .headers()?
        .iter()
        .map(|h| Value::String(h.to_string()))
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(Value::Array(rec?.iter().map(cell).collect()));
    }
    let mut obj = Map::new();
    obj.insert("columns".into(), Value::Array(columns));
    obj.insert("rows".into(), Value::Array(rows));
    Ok(Value::Object(obj))
}

fn cell(s: &str) -> Value {
    if s.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = s.parse::<u64>() {
        return Value::Number(i.into());
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::Number(i.into());
    }
    match s.parse::<f64>().ok().and_then(Number::from_f64) {
        Some(n) => Value::Number(n),
        None => Value::String(s.to_string()),
    }
}

/// Writes `<dir>/<stem>.<ext>` from a CSV-producing closure.
pub fn write_table(
    dir: &Path,
    stem: &str,
    format: Format,
    fill: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<PathBuf> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    let mut f = File::create(&path)?;
    match format {
        Format::Csv => f.write_all(&buf)?,
        Format::Json => {
            serde_json::to_writer(&mut f, &csv_to_json(&buf)?)?;
            f.write_all(b"\n")?;
        }
    }
    Ok(path)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
