//! Dataset files (`lipscde-ds/1`) and atomic file writes.
//!
//! A dataset directory holds `dataset.jsonl`, one unit per line:
//!
//! ```text
//! {"unit_id":0,"timestamps":[..],"x":[[..],..],"a":[[..],..],"y":[..],
//!  "z_true":[[..],..],"cf_plans":[{"name":"flip_final","a":[[..],..]},..],
//!  "y_cf":[[..],..]}
//! ```
//!
//! and `manifest.json` with the format tag, the simulator config, and the
//! train/val/test index lists.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{CounterfactualPlan, Dataset, Manifest, UnitRecord, DATASET_FORMAT};
use crate::tensor::Tensor;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct WirePlan {
    name: String,
    a: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct WireUnit {
    unit_id: usize,
    timestamps: Vec<f64>,
    x: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    y: Vec<f64>,
    z_true: Vec<Vec<f64>>,
    cf_plans: Vec<WirePlan>,
    y_cf: Vec<Vec<f64>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn unit_to_wire(u: &UnitRecord) -> WireUnit {
    WireUnit {
        unit_id: u.unit_id(),
        timestamps: u.timestamps().to_vec(),
        x: rows(u.observed().x),
        a: rows(u.treatments()),
        y: u.outcomes().to_vec(),
        z_true: rows(u.z_true()),
        cf_plans: u
            .cf_plans()
            .iter()
            .map(|p| WirePlan {
                name: p.name.clone(),
                a: rows(&p.treatments),
            })
            .collect(),
        y_cf: u.y_cf().to_vec(),
    }
}

fn unit_from_wire(w: WireUnit) -> Result<UnitRecord> {
    let plans = w
        .cf_plans
        .into_iter()
        .map(|p| {
            Ok(CounterfactualPlan {
                name: p.name,
                treatments: Tensor::from_rows(&p.a)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    UnitRecord::from_parts(
        w.unit_id,
        w.timestamps,
        Tensor::from_rows(&w.x)?,
        Tensor::from_rows(&w.a)?,
        w.y,
        Tensor::from_rows(&w.z_true)?,
        plans,
        w.y_cf,
    )
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    for u in &ds.units {
        serde_json::to_writer(&mut buf, &unit_to_wire(u))?;
        buf.push(b'\n');
    }
    write_atomic(&dir.join(DATASET_FILE), &buf)?;
    let manifest = serde_json::to_vec_pretty(&ds.manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Parse(format!(
            "unsupported dataset format {:?}, expected {DATASET_FORMAT:?}",
            manifest.format
        )));
    }
    let f = fs::File::open(dir.join(DATASET_FILE))?;
    let mut units = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        units.push(unit_from_wire(serde_json::from_str(&line)?)?);
    }
    Ok(Dataset { units, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, SimConfig};

    #[test]
    fn dataset_round_trip() {
        let cfg = SimConfig {
            n_units: 12,
            missing_rate: 0.15,
            ..SimConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("lipscde-ds/1"));
    }
}
