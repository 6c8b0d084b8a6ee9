//! Dataset directories and resolution of a configuration's data source.
//!
//! A dataset directory holds `case_NNN.{json,raw}` volumes,
//! `case_NNN_mask.{json,raw}` masks and `index.json`.

use std::fs;
use std::path::{Path, PathBuf};

use kmaxseg_core::data::{generate_phantom, LabelMask, Volume};
use kmaxseg_core::trainer::DataSpec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{read_mask, read_volume, write_mask, write_volume};

pub const INDEX: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub name: String,
    pub volume: String,
    pub mask: String,
    /// Whether this case keeps its mask when split at the index's labeled fraction.
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub seed: u64,
    pub shape: [usize; 3],
    pub classes: u8,
    pub labeled_fraction: f64,
    pub cases: Vec<CaseEntry>,
}

/// Named volume with its ground-truth mask.
pub type Case = (String, Volume, LabelMask);

/// Seed of the `i`-th phantom of a generation run.
pub fn case_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Number of labeled cases among `n` at `fraction`: `round(fraction·n)`,
/// at least one.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

pub fn phantom_cases(count: usize, shape: [usize; 3], classes: u8, seed: u64) -> Result<Vec<Case>> {
    (0..count)
        .map(|i| {
            let (v, m) = generate_phantom(case_seed(seed, i), shape, classes)?;
            Ok((format!("case_{i:03}"), v, m))
        })
        .collect()
}

/// Writes `count` phantom cases and their index to `out`.
pub fn generate(out: &Path, count: usize, shape: [usize; 3], classes: u8, seed: u64, labeled_fraction: f64) -> Result<Index> {
    if count == 0 {
        return Err(Error::Argument("--count must be positive".into()));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Argument(format!("--labeled-fraction must be in (0, 1], got {labeled_fraction}")));
    }
    let cases = phantom_cases(count, shape, classes, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n_lab = labeled_count(count, labeled_fraction);
    let mut entries = Vec::with_capacity(count);
    for (i, (name, v, m)) in cases.iter().enumerate() {
        let mask_name = format!("{name}_mask");
        write_volume(&out.join(name), v)?;
        write_mask(&out.join(&mask_name), m)?;
        entries.push(CaseEntry {
            name: name.clone(),
            volume: format!("{name}.json"),
            mask: format!("{mask_name}.json"),
            labeled: i < n_lab,
        });
    }
    let index = Index { seed, shape, classes, labeled_fraction, cases: entries };
    let path = out.join(INDEX);
    let text = serde_json::to_string_pretty(&index).expect("index serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<Index> {
    let path = dir.join(INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("line {} column {}: {e}", e.line(), e.column())))
}

/// Every case of a dataset directory in index order.
pub fn load_dir(dir: &Path) -> Result<Vec<Case>> {
    let index = read_index(dir)?;
    index
        .cases
        .iter()
        .map(|c| {
            let v = read_volume(&dir.join(&c.volume))?;
            let m = read_mask(&dir.join(&c.mask))?;
            if v.dims() != m.dims() {
                return Err(Error::format(dir.join(&c.mask), format!("mask {:?} vs volume {:?}", m.dims(), v.dims())));
            }
            Ok((c.name.clone(), v, m))
        })
        .collect()
}

/// Training and validation cases of a configuration; phantoms get `classes`
/// labels. Directory data is resolved relative to `base` and must contain
/// `train/` and `val/` dataset directories.
pub fn resolve(spec: &DataSpec, classes: u8, base: &Path) -> Result<(Vec<Case>, Vec<Case>)> {
    match spec {
        DataSpec::Phantom { train_count, val_count, shape, seed } => {
            let train = phantom_cases(*train_count, *shape, classes, *seed)?;
            let val = phantom_cases(*val_count, *shape, classes, case_seed(*seed, usize::MAX / 2))?;
            Ok((train, val))
        }
        DataSpec::Directory { path } => {
            let root: PathBuf = base.join(path);
            Ok((load_dir(&root.join("train"))?, load_dir(&root.join("val"))?))
        }
    }
}
