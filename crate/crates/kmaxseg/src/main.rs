use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kmaxseg::run::{fit, write_metrics, Event};
use kmaxseg::{ablate, config, dataset, plot, run, Result};

#[derive(Parser)]
#[command(name = "kmaxseg", version, about = "Semi-supervised volumetric segmentation with k-means query decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom volumes, masks and an index.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Volume shape as D,H,W.
        #[arg(long, value_parser = parse_shape)]
        shape: [usize; 3],
        #[arg(long, default_value_t = 3)]
        classes: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of cases marked labeled in the index.
        #[arg(long, default_value_t = 0.1)]
        labeled_fraction: f64,
    },
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to runs/<config name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint directory written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Refuse unless the checkpoint was trained with this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for metrics.csv and metrics.json; defaults to <checkpoint>/eval.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four loss-component rows and merge their metrics.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chart a finished run or ablation as SVG files.
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// Loss-curve file; metric bars are written to <stem>_metrics.svg beside it.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|p: Vec<usize>| format!("expected D,H,W, got {} values", p.len()))
}

fn default_out(config: &Path) -> PathBuf {
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    Path::new("runs").join(stem)
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn report_event(prefix: &str, event: Event<'_>) {
    match event {
        Event::Step { step, total, losses } => {
            if step == total || step % 10 == 0 {
                eprintln!(
                    "{prefix}step {step}/{total} total {:.5} ce {:.5} dice {:.5} segc {:.3e} qdc {:.3e} lambda {:.4}",
                    losses.l_total, losses.l_ce, losses.l_dice, losses.l_segc, losses.l_qdc, losses.lambda_used
                );
            }
        }
        Event::Eval { step, report } => {
            eprintln!("{prefix}eval at step {step}: dice {:.4} jaccard {:.4}", report.mean_dice, report.mean_jaccard);
        }
        Event::Checkpoint { path } => eprintln!("{prefix}checkpoint {}", path.display()),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { out, count, shape, classes, seed, labeled_fraction } => {
            let index = dataset::generate(&out, count, shape, classes, seed, labeled_fraction)?;
            eprintln!("wrote {} cases to {}", index.cases.len(), out.display());
        }
        Command::Train { config: path, out, resume } => {
            let cfg = config::load_config(&path)?;
            let out = out.unwrap_or_else(|| default_out(&path));
            let summary = fit(&cfg, &out, &base_dir(&path), resume.as_deref(), &mut |e| report_event("", e))?;
            eprintln!("run written to {}", summary.dir.display());
        }
        Command::Eval { checkpoint, data, config: cfg_path, out } => {
            let expected = cfg_path.as_deref().map(config::load_config).transpose()?;
            let report = run::eval_checkpoint(&checkpoint, &data, expected.as_ref())?;
            let out = out.unwrap_or_else(|| checkpoint.join("eval"));
            write_metrics(&out, &report)?;
            println!("dice {:.4} jaccard {:.4}", report.mean_dice, report.mean_jaccard);
        }
        Command::Ablate { config: path, out } => {
            let cfg = config::load_config(&path)?;
            let out = out.unwrap_or_else(|| default_out(&path));
            let rows = ablate::ablate(&cfg, &out, &base_dir(&path), &mut |row, e| {
                report_event(&format!("[row {}] ", row + 1), e)
            })?;
            for r in rows {
                println!("row {} qdc={} segc={} dice {:.4}", r.row, r.use_qdc, r.use_segc, r.dice);
            }
        }
        Command::Plot { run, out } => {
            for path in plot::plot_run(&run, &out)? {
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

