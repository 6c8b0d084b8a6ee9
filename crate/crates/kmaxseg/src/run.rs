//! Training runs and their on-disk artifacts.
//!
//! A run directory contains:
//!
//! - `config.json`: the resolved configuration
//! - `loss.csv`: `step,l_ce,l_dice,l_segc,l_qdc,lambda,l_total`, one row per step
//! - `eval.csv`: mean metrics at every evaluation
//! - `metrics.csv` / `metrics.json`: final per-volume scores and their means
//! - `checkpoint/`: the final state, plus `checkpoints/step_NNNNNN/` at the
//!   configured interval

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kmaxseg_core::losses::LossBundle;
use kmaxseg_core::metrics::MetricsReport;
use kmaxseg_core::model::Model;
use kmaxseg_core::trainer::{evaluate, train_step, Pools, TrainConfig, TrainState};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{config_hash, config_json};
use crate::dataset::{resolve, Case};
use crate::error::{Error, Result};

pub const LOSS_HEADER: &str = "step,l_ce,l_dice,l_segc,l_qdc,lambda,l_total";

/// Progress events reported while a run executes.
#[derive(Clone, Debug)]
pub enum Event<'a> {
    Step { step: u64, total: u64, losses: &'a LossBundle },
    Eval { step: u64, report: &'a MetricsReport },
    Checkpoint { path: &'a Path },
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub steps: u64,
    pub final_losses: Option<LossBundle>,
    pub report: Option<MetricsReport>,
}

struct CsvFile {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvFile {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut f = Self { path, out: BufWriter::new(file) };
        f.line(header)?;
        Ok(f)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn loss_row(step: u64, l: &LossBundle) -> String {
    format!("{step},{},{},{},{},{},{}", l.l_ce, l.l_dice, l.l_segc, l.l_qdc, l.lambda_used, l.l_total)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv` (one row per volume) and `metrics.json` into `dir`.
pub fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut rows = vec![vec!["volume".to_string(), "dice".into(), "jaccard".into(), "hd95".into(), "asd".into()]];
    for v in &report.volumes {
        rows.push(vec![v.name.clone(), v.dice.to_string(), v.jaccard.to_string(), opt(v.hd95), opt(v.asd)]);
    }
    for r in rows {
        w.write_record(&r).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    write_text(&dir.join("metrics.json"), &json)
}

fn training_pools(train: Vec<Case>, config: &TrainConfig) -> Result<Pools> {
    let samples = train.into_iter().map(|(_, v, m)| (v, m)).collect();
    Ok(Pools::split(samples, config.labeled_fraction)?)
}

fn class_count(config: &TrainConfig) -> Result<u8> {
    u8::try_from(config.model.num_classes).map_err(|_| Error::Config("num_classes must fit in a byte".into()))
}

/// Trains per `config`, writing artifacts to `out`. Directory data paths are
/// resolved against `base`. With `resume`, training continues from that
/// checkpoint, whose configuration must hash identically.
pub fn fit(
    config: &TrainConfig,
    out: &Path,
    base: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(Event<'_>),
) -> Result<RunSummary> {
    config.validate()?;
    let (train, val) = resolve(&config.data, class_count(config)?, base)?;
    if let Some((name, _, m)) = train.iter().chain(&val).find(|(_, _, m)| m.num_classes() as usize != config.model.num_classes) {
        return Err(Error::Mismatch(format!(
            "case {name} has {} classes but the model predicts {}",
            m.num_classes(),
            config.model.num_classes
        )));
    }
    let pools = training_pools(train, config)?;
    let (model, mut state) = match resume {
        Some(dir) => {
            let (manifest, model, state) = load_checkpoint(dir)?;
            let expected = config_hash(config);
            if manifest.config_hash != expected {
                return Err(Error::Mismatch(format!(
                    "checkpoint {} was written with config {} but this run's config hashes to {expected}",
                    dir.display(),
                    manifest.config_hash
                )));
            }
            (model, state)
        }
        None => {
            let (model, params) = Model::build(config.model.clone(), config.seed)?;
            (model, TrainState::new(params, config))
        }
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.json"), &config_json(config))?;
    let mut loss_csv = CsvFile::create(out.join("loss.csv"), LOSS_HEADER)?;
    let mut eval_csv = CsvFile::create(out.join("eval.csv"), "step,dice,jaccard,hd95,asd")?;

    let mut last = None;
    while state.step < config.steps {
        let losses = train_step(&model, &mut state, &pools, config)?;
        loss_csv.line(&loss_row(state.step, &losses))?;
        progress(Event::Step { step: state.step, total: config.steps, losses: &losses });
        last = Some(losses);
        let step = state.step;
        if config.eval_interval > 0 && step % config.eval_interval == 0 && step < config.steps && !val.is_empty() {
            let report = evaluate(&model, &state.params, &val, config.overlap)?;
            eval_csv.line(&format!("{step},{},{},{},{}", report.mean_dice, report.mean_jaccard, opt(report.mean_hd95), opt(report.mean_asd)))?;
            progress(Event::Eval { step, report: &report });
        }
        if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 && step < config.steps {
            let dir = out.join("checkpoints").join(format!("step_{step:06}"));
            save_checkpoint(&dir, config, &state)?;
            progress(Event::Checkpoint { path: &dir });
        }
    }

    let final_dir = out.join("checkpoint");
    save_checkpoint(&final_dir, config, &state)?;
    progress(Event::Checkpoint { path: &final_dir });
    let report = if val.is_empty() {
        None
    } else {
        let report = evaluate(&model, &state.params, &val, config.overlap)?;
        eval_csv.line(&format!(
            "{},{},{},{},{}",
            state.step,
            report.mean_dice,
            report.mean_jaccard,
            opt(report.mean_hd95),
            opt(report.mean_asd)
        ))?;
        write_metrics(out, &report)?;
        progress(Event::Eval { step: state.step, report: &report });
        Some(report)
    };
    Ok(RunSummary { dir: out.to_path_buf(), steps: state.step, final_losses: last, report })
}

/// Scores a checkpoint on every case of a dataset directory.
pub fn eval_checkpoint(checkpoint: &Path, data: &Path, expected_config: Option<&TrainConfig>) -> Result<MetricsReport> {
    let (manifest, model, state) = load_checkpoint(checkpoint)?;
    if let Some(cfg) = expected_config {
        let hash = config_hash(cfg);
        if hash != manifest.config_hash {
            return Err(Error::Mismatch(format!(
                "checkpoint {} was trained with config {} but --config hashes to {hash}",
                checkpoint.display(),
                manifest.config_hash
            )));
        }
    }
    let cases = crate::dataset::load_dir(data)?;
    if let Some((name, _, m)) = cases.iter().find(|(_, _, m)| m.num_classes() as usize != model.config.num_classes) {
        return Err(Error::Mismatch(format!(
            "case {name} has {} classes but the checkpoint predicts {}",
            m.num_classes(),
            model.config.num_classes
        )));
    }
    Ok(evaluate(&model, &state.params, &cases, manifest.config.overlap)?)
}
