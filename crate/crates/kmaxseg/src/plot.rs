//! Static SVG charts of a finished run: loss curves and per-metric bars.

use std::fs;
use std::path::{Path, PathBuf};

use kmaxseg_core::metrics::MetricsReport;
use plotters::prelude::*;

use crate::ablate::read_table;
use crate::error::{Error, Result};

const SERIES: [&str; 5] = ["l_ce", "l_dice", "l_segc", "l_qdc", "l_total"];
const COLORS: [RGBColor; 5] = [BLUE, RED, GREEN, MAGENTA, BLACK];

/// Columns `step` and [`SERIES`] of a loss CSV.
pub fn read_losses(path: &Path) -> Result<Vec<(f64, [f64; 5])>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("missing column {name}")))
    };
    let step = col("step")?;
    let cols = SERIES.map(col);
    let cols: Vec<usize> = cols.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let num = |c: usize| {
            record[c]
                .parse::<f64>()
                .map_err(|e| Error::format(path, format!("row {}: {e}", i + 2)))
        };
        let mut values = [0.0; 5];
        for (v, &c) in values.iter_mut().zip(&cols) {
            *v = num(c)?;
        }
        rows.push((num(step)?, values));
    }
    Ok(rows)
}

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::format(path, format!("cannot draw chart: {e}"))
}

pub fn plot_losses(rows: &[(f64, [f64; 5])], out: &Path) -> Result<()> {
    let root = SVGBackend::new(out, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err(out))?;
    let x_max = rows.last().map_or(1.0, |r| r.0).max(1.0);
    let y_max = rows
        .iter()
        .flat_map(|r| r.1)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(draw_err(out))?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(draw_err(out))?;
    for (s, name) in SERIES.iter().enumerate() {
        let color = COLORS[s];
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.0, r.1[s])), color.stroke_width(2)))
            .map_err(draw_err(out))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err(out))?;
    root.present().map_err(draw_err(out))
}

/// One panel per metric with one bar per labelled entry. Missing values are
/// drawn as gaps.
pub fn plot_metric_bars(labels: &[String], metrics: &[(&str, Vec<Option<f64>>)], out: &Path) -> Result<()> {
    let root = SVGBackend::new(out, (1000, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err(out))?;
    let panels = root.split_evenly((2, 2));
    let n = labels.len().max(1);
    for (panel, (name, values)) in panels.iter().zip(metrics) {
        let top = values.iter().flatten().fold(0.0f64, |m, v| m.max(*v)).max(1e-6) * 1.1;
        let mut chart = ChartBuilder::on(panel)
            .caption(*name, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d((0..n).into_segmented(), 0.0..top)
            .map_err(draw_err(out))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| match x {
                SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
                _ => String::new(),
            })
            .draw()
            .map_err(draw_err(out))?;
        chart
            .draw_series(values.iter().enumerate().filter_map(|(i, v)| {
                v.map(|v| {
                    let mut bar = Rectangle::new(
                        [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), v)],
                        BLUE.mix(0.6).filled(),
                    );
                    bar.set_margin(0, 0, 6, 6);
                    bar
                })
            }))
            .map_err(draw_err(out))?;
    }
    root.present().map_err(draw_err(out))
}

/// Path of the metric chart that accompanies the loss chart at `out`.
pub fn metrics_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
    out.with_file_name(format!("{stem}_metrics.svg"))
}

/// Loss curves of `run/loss.csv` go to `out`; metric bars go next to it (see
/// [`metrics_path`]). Ablation directories are charted per row, single runs
/// per validation volume. Returns the written files.
pub fn plot_run(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut written = Vec::new();
    let ablation = run.join("ablation.json").exists();
    let loss_source = if ablation { run.join("row_4").join("loss.csv") } else { run.join("loss.csv") };
    plot_losses(&read_losses(&loss_source)?, out)?;
    written.push(out.to_path_buf());

    let (labels, dice, jaccard, hd95, asd): (Vec<String>, Vec<_>, Vec<_>, Vec<_>, Vec<_>) = if ablation {
        let rows = read_table(run)?;
        (
            rows.iter().map(|r| format!("row {}", r.row)).collect(),
            rows.iter().map(|r| Some(r.dice)).collect(),
            rows.iter().map(|r| Some(r.jaccard)).collect(),
            rows.iter().map(|r| r.hd95).collect(),
            rows.iter().map(|r| r.asd).collect(),
        )
    } else {
        let path = run.join("metrics.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let v = &report.volumes;
        (
            v.iter().map(|v| v.name.clone()).collect(),
            v.iter().map(|v| Some(v.dice)).collect(),
            v.iter().map(|v| Some(v.jaccard)).collect(),
            v.iter().map(|v| v.hd95).collect(),
            v.iter().map(|v| v.asd).collect(),
        )
    };
    let bars = metrics_path(out);
    plot_metric_bars(
        &labels,
        &[("dice", dice), ("jaccard", jaccard), ("hd95 (mm)", hd95), ("asd (mm)", asd)],
        &bars,
    )?;
    written.push(bars);
    Ok(written)
}
