//! Loss-component ablation grid: supervised loss alone, plus query-level
//! consistency, plus segmentation-level consistency, and both.

use std::fs;
use std::path::Path;

use kmaxseg_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::run::{fit, Event};

/// `(use_qdc, use_segc)` per row, in table order.
pub const GRID: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

pub const HEADER: [&str; 8] = ["row", "l_seg", "l_qdc", "l_segc", "dice", "jaccard", "hd95", "asd"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub use_qdc: bool,
    pub use_segc: bool,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn row_config(base: &TrainConfig, row: usize) -> TrainConfig {
    let (use_qdc, use_segc) = GRID[row];
    TrainConfig { use_qdc, use_segc, ..base.clone() }
}

/// Runs all four rows under `out/row_N` and writes `out/ablation.csv` and
/// `out/ablation.json`.
pub fn ablate(config: &TrainConfig, out: &Path, base: &Path, progress: &mut dyn FnMut(usize, Event<'_>)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(GRID.len());
    for row in 0..GRID.len() {
        let cfg = row_config(config, row);
        let summary = fit(&cfg, &out.join(format!("row_{}", row + 1)), base, None, &mut |e| progress(row, e))?;
        let report = summary
            .report
            .ok_or_else(|| Error::Config("ablation needs a non-empty validation set".into()))?;
        rows.push(AblationRow {
            row: row + 1,
            use_qdc: cfg.use_qdc,
            use_segc: cfg.use_segc,
            dice: report.mean_dice,
            jaccard: report.mean_jaccard,
            hd95: report.mean_hd95,
            asd: report.mean_asd,
        });
    }
    write_table(out, &rows)?;
    Ok(rows)
}

fn mark(on: bool) -> String {
    if on { "x" } else { "" }.to_string()
}

pub fn write_table(out: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record(HEADER).map_err(|e| Error::format(&path, e.to_string()))?;
    for r in rows {
        let record = [
            r.row.to_string(),
            mark(true),
            mark(r.use_qdc),
            mark(r.use_segc),
            r.dice.to_string(),
            r.jaccard.to_string(),
            fmt(r.hd95),
            fmt(r.asd),
        ];
        w.write_record(&record).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let json_path = out.join("ablation.json");
    let json = serde_json::to_string_pretty(rows).expect("rows serialize") + "\n";
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

pub fn read_table(out: &Path) -> Result<Vec<AblationRow>> {
    let path = out.join("ablation.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}
