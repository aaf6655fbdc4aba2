//! Loading cities and crime distributions from the file formats the CLI and
//! service accept.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use crimesim_core::env::{ingest_crimes, load_city, CityEnvironment, CrimeDistribution};
use crimesim_core::synthetic::SyntheticCity;

use crate::error::CliError;

/// Loads a city from a bundle (`.json`), a features table (`.csv`) or a
/// `synthetic:ROWSxCOLS[:SEED]` spec.
pub fn load_city_arg(spec: &str) -> Result<CityEnvironment, CliError> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let dims = parts.next().unwrap_or_default();
        let (rows, cols) = dims
            .split_once('x')
            .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
            .ok_or_else(|| CliError::input(format!("bad synthetic city `{spec}`, expected synthetic:ROWSxCOLS[:SEED]")))?;
        let seed = match parts.next() {
            Some(s) => s.parse().map_err(|_| CliError::input(format!("bad synthetic seed `{s}`")))?,
            None => 1,
        };
        return Ok(SyntheticCity::grid(rows, cols, seed).build());
    }
    let path = Path::new(spec);
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(load_city(path, None).map_err(CliError::input)?.0),
        _ => CityEnvironment::load_bundle(path).map_err(CliError::input),
    }
}

#[derive(Deserialize)]
struct CountRow {
    cell_id: String,
    count: u64,
}

/// Reads a crime distribution from:
///
/// * a run summary (`summary.json`), using its per-cell counts;
/// * a distribution JSON document (`{"counts": {...}}`);
/// * a `cell_id,count` CSV;
/// * a crime-record CSV with timestamps, which needs `env` to assign cells.
pub fn load_distribution(path: &Path, env: Option<&CityEnvironment>) -> Result<CrimeDistribution, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let bad = |e: &dyn std::fmt::Display| CliError::input(format!("{}: {e}", path.display()));
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let mut v: Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
        if let Some(inner) = v.get_mut("per_cell_counts") {
            v = inner.take();
        }
        return serde_json::from_value(v).map_err(|e| bad(&e));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| bad(&e))?.clone();
    if headers.iter().any(|h| h == "count") {
        let rows: Vec<CountRow> = rdr.deserialize().collect::<Result<_, _>>().map_err(|e| bad(&e))?;
        return Ok(CrimeDistribution::from_counts(rows.into_iter().map(|r| (r.cell_id, r.count))));
    }
    let env = env
        .ok_or_else(|| CliError::input(format!("{} holds crime records; pass --city to assign them to cells", path.display())))?;
    let (dist, report) = ingest_crimes(env, path, None).map_err(|e| bad(&e))?;
    tracing::info!(?report, "ingested crime records");
    Ok(dist)
}

/// Parses a comma-separated list of K values.
pub fn parse_ks(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|k| {
            let k = k.trim();
            k.parse::<f64>().ok().filter(|v| *v > 0.0 && v.is_finite()).ok_or_else(|| format!("`{k}` is not a positive number"))
        })
        .collect()
}
