//! File formats: coreset JSON with an `(index, weight)` CSV beside it, and
//! benchmark reports as JSON plus a flat CSV of trial records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use co2_core::data::PointCloud;
use co2_core::recombination::Coreset;
use serde::{Deserialize, Serialize};

use crate::bench::RunReport;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoresetFile<C> {
    pub version: u32,
    pub method: String,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub config: C,
    pub seed: u64,
    pub m_target: usize,
    pub quad_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<u64>,
}

impl<C> CoresetFile<C> {
    pub fn new(coreset: &Coreset, config: C, timestamp: bool) -> Self {
        Self {
            version: FORMAT_VERSION,
            method: coreset.method.clone(),
            indices: coreset.indices.clone(),
            weights: coreset.weights.clone(),
            config,
            seed: coreset.seed,
            m_target: coreset.m_target,
            quad_error: coreset.quad_error,
            created: timestamp.then(unix_now),
        }
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// `path` with its extension replaced by `csv`.
pub fn csv_sibling(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Writes the JSON at `path` and the weights CSV next to it.
pub fn write_coreset<C: Serialize>(path: &Path, file: &CoresetFile<C>) -> Result<()> {
    write_json(path, file)?;
    let mut w = csv::Writer::from_writer(create(&csv_sibling(path))?);
    w.write_record(["index", "weight"])?;
    for (i, x) in file.indices.iter().zip(&file.weights) {
        w.serialize((i, x))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a coreset JSON and validates it against its parent cloud.
pub fn read_coreset(path: &Path, parent: Arc<PointCloud>) -> Result<Coreset> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let coreset: Coreset =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(coreset.attach(parent)?)
}

/// Writes the report JSON at `path` and the trial records as CSV next to it.
pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    write_json(path, report)?;
    let mut w = csv::Writer::from_writer(create(&csv_sibling(path))?);
    w.write_record([
        "method",
        "m",
        "trial",
        "draw",
        "support",
        "divergence",
        "mmd_sq",
        "quad",
        "rel_error",
        "wall_ms",
        "seed",
    ])?;
    for r in &report.records {
        w.write_record([
            r.method.name().to_string(),
            r.m.to_string(),
            r.trial.to_string(),
            r.draw.to_string(),
            r.support.to_string(),
            r.divergence.to_string(),
            r.mmd_sq.to_string(),
            r.quad.to_string(),
            r.rel_error.map(|x| x.to_string()).unwrap_or_default(),
            format!("{:.3}", r.wall_ms),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
