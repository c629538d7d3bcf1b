//! `vf`: phantom generation, training, evaluation, inference and gradient checks.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use vf_core::config::read_toml;
use vf_core::data::{generate_dataset, load_cases, read_manifest};
use vf_core::infer::{evaluate_cases, predict, report_csv};
use vf_core::train::{train, BEST_CKPT, LAST_CKPT, METRICS_FILE};
use vf_core::volume::{load_volume, save_volume, Grid};
use vf_core::{checkpoint, gradsuite, Ablation, Model, PhantomSpec, Result, RunConfig, VfError, Volume};

use manifest::{RunManifest, MANIFEST_FILE};

/// Environment variable that overrides `train.seed`.
const SEED_VAR: &str = "VF_SEED";

#[derive(Parser)]
#[command(name = "vf", version, about = "Vessel segmentation with variational fusion and evidential refinement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic vessel dataset.
    PhantomGen {
        /// TOML phantom spec; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, metrics.csv and run.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Ablation row (net1, net2, net3, net4, ours); overrides the config flags.
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window evaluation of a checkpoint on a dataset; writes a CSV report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// First case index (inclusive).
        #[arg(long, default_value_t = 0)]
        first: usize,
        /// Number of cases; defaults to the rest of the dataset.
        #[arg(long)]
        count: Option<usize>,
        /// Window extents D,H,W; defaults to the model's input size.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        window: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one volume; writes prob.vvf, mask.vvf and uncertainty.vvf.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 3)]
        window: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::PhantomGen { spec, count, out } => {
            let spec: PhantomSpec = match spec {
                Some(p) => read_toml(&p)?,
                None => PhantomSpec::default(),
            };
            let m = generate_dataset(&spec, count, &out)?;
            println!("wrote {} cases to {}", m.count, out.display());
        }
        Cmd::Train { config, ablation, out } => cmd_train(&config, ablation, &out)?,
        Cmd::Eval {
            checkpoint,
            data,
            first,
            count,
            window,
            out,
        } => {
            let model: Model<f32> = checkpoint::load(&checkpoint)?;
            let total = read_manifest(&data)?.count;
            let end = count.map_or(total, |c| first + c);
            let cases = load_cases(&data, first..end)?;
            let rows = evaluate_cases(&model, &cases, window_for(&model, window)?)?;
            let csv = report_csv(&rows);
            std::fs::write(&out, &csv).map_err(|e| VfError::io(&out, e))?;
            print!("{csv}");
        }
        Cmd::Infer {
            checkpoint,
            volume,
            window,
            out,
        } => {
            let model: Model<f32> = checkpoint::load(&checkpoint)?;
            let v: Volume = load_volume(&volume)?;
            let pred = predict(&model, &v, window_for(&model, window)?)?;
            std::fs::create_dir_all(&out).map_err(|e| VfError::io(&out, e))?;
            let fg: &Grid<f32> = pred.probs.last().expect("at least two classes");
            save_volume(fg, &out.join("prob.vvf"))?;
            save_volume(&pred.mask, &out.join("mask.vvf"))?;
            save_volume(&pred.uncertainty, &out.join("uncertainty.vvf"))?;
            println!("wrote prob.vvf, mask.vvf, uncertainty.vvf to {}", out.display());
        }
        Cmd::Gradcheck { filter } => {
            let reports = gradsuite::run(filter.as_deref());
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("{} cases, {failed} failed", reports.len());
            if failed > 0 || reports.is_empty() {
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn window_for(model: &Model<f32>, w: Option<Vec<usize>>) -> Result<[usize; 3]> {
    let w = w.map_or(model.config().input_dims, |v| [v[0], v[1], v[2]]);
    model.config().check_input(w).map_err(|e| VfError::config("window", e.to_string()))?;
    Ok(w)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn cmd_train(config: &Path, ablation: Option<Ablation>, out: &Path) -> Result<()> {
    let mut cfg: RunConfig = read_toml(config)?;
    if let Some(a) = ablation {
        cfg.model.ablation = a.flags();
    }
    if let Ok(s) = std::env::var(SEED_VAR) {
        cfg.train.seed = s
            .trim()
            .parse()
            .map_err(|_| VfError::config(SEED_VAR, format!("`{s}` is not an unsigned integer")))?;
    }
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| VfError::io(out, e))?;
    let manifest = RunManifest {
        seed: cfg.train.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: unix_now(),
        metrics_csv: out.join(METRICS_FILE),
        best_checkpoint: out.join(BEST_CKPT),
        last_checkpoint: out.join(LAST_CKPT),
        config: cfg.clone(),
    };
    manifest.write(&out.join(MANIFEST_FILE))?;
    let s = train(&cfg, out, &mut |r| {
        let v = r.val_dsc.map_or("-".into(), |d| format!("{d:.4}"));
        println!("epoch {:>4}  loss {:.5}  val_dsc {v}", r.epoch, r.loss.total);
    })?;
    manifest::write_finished(out, unix_now())?;
    println!("best epoch {}; outputs in {}", s.best_epoch, out.display());
    Ok(())
}
