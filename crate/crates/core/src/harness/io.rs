//! Result persistence.
//!
//! Model snapshots use a little-endian flat binary layout:
//!
//! ```text
//! b"FMAT"  u32 version  u32 layer_count
//! per layer: u32 rows  u32 cols  f64[rows*cols] weights (row-major)  f64[rows] biases
//! ```
//!
//! Layers are the extractor layers in order followed by the classifier.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use super::config::RunConfig;
use super::ledger::LedgerRow;
use super::RunResult;
use crate::error::{Error, Result};
use crate::nn::{Classifier, Dense, Extractor, ModelParams};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"FMAT";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(model: &ModelParams, mut w: W) -> Result<()> {
    let layers: Vec<&Dense> = model
        .extractor
        .layers()
        .iter()
        .chain(std::iter::once(model.classifier.dense()))
        .collect();
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        w.write_all(&(l.out_dim() as u32).to_le_bytes())?;
        w.write_all(&(l.in_dim() as u32).to_le_bytes())?;
        for v in l.weights().iter().chain(l.bias()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    if count < 2 {
        return Err(Error::Snapshot(format!("need at least 2 layers, found {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let weights = read_f64s(&mut r, rows * cols)?;
        let bias = read_f64s(&mut r, rows)?;
        layers.push(Dense::from_parts(cols, rows, weights, bias)?);
    }
    let classifier = Classifier::new(layers.pop().expect("count >= 2"));
    ModelParams::new(Extractor::new(layers)?, classifier)
}

pub fn save_snapshot(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_snapshot(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_snapshot(std::io::BufReader::new(fs::File::open(path)?))
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    method: String,
    seed: u64,
    config: &'a RunConfig,
}

pub fn write_metrics_csv<W: Write>(result: &RunResult, w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for row in &result.metrics {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_ledger_csv<W: Write>(result: &RunResult, w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in &result.ledger.rounds {
        csv.serialize(LedgerRow::from(r))?;
    }
    csv.flush()?;
    Ok(())
}

/// Writes `manifest.json`, `metrics.csv`, `ledger.csv` and one snapshot per
/// client (plus the global model, when there is one) under `dir`.
pub fn write_outputs(cfg: &RunConfig, result: &RunResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("models"))?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        method: result.method.to_string(),
        seed: cfg.seed,
        config: cfg,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_metrics_csv(result, fs::File::create(dir.join("metrics.csv"))?)?;
    write_ledger_csv(result, fs::File::create(dir.join("ledger.csv"))?)?;
    for (i, m) in result.client_models.iter().enumerate() {
        save_snapshot(m, dir.join("models").join(format!("client_{i:03}.fmat")))?;
    }
    if let Some(g) = &result.global_model {
        save_snapshot(g, dir.join("models").join("global.fmat"))?;
    }
    Ok(())
}
