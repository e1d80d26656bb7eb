use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use multideriv::commands::{self, EvalSource};
use multideriv::{HarnessError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "multideriv", version, about = "Synthetic pulse video data, training, evaluation and ablation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every stage seed derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render clips, PPG and fiducial sidecars and a manifest.
    GenData(Common),
    /// Train the configured model on the training split.
    Train(Common),
    /// Score a checkpoint (or the ground truth) on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to `<out>/train/checkpoint_final.mdck`.
        #[arg(long, conflicts_with = "truth")]
        checkpoint: Option<PathBuf>,
        /// Score the targets against themselves.
        #[arg(long)]
        truth: bool,
    },
    /// Train and score every input/target configuration.
    Ablate(Common),
    /// Write plot CSVs from an evaluation report.
    ExportPlots {
        #[command(flatten)]
        common: Common,
        /// Report JSON; defaults to `<out>/eval/report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut log = |s: &str| println!("{s}");
    match cli.cmd {
        Cmd::GenData(c) => {
            let cfg = load(&c)?;
            let m = commands::cmd_gen_data(&cfg)?;
            println!("wrote {} clips to {}", m.clips.len(), cfg.data_dir().display());
        }
        Cmd::Train(c) => {
            let cfg = load(&c)?;
            let a = commands::cmd_train(&cfg, &mut log)?;
            println!(
                "best epoch {} of {}; artifacts in {}",
                a.outcome.best_epoch,
                a.outcome.history.len(),
                a.dir.display()
            );
        }
        Cmd::Eval {
            common,
            checkpoint,
            truth,
        } => {
            let cfg = load(&common)?;
            let default = cfg.out.join("train").join("checkpoint_final.mdck");
            let ck = checkpoint.unwrap_or(default);
            let src = if truth {
                EvalSource::Truth
            } else {
                EvalSource::Checkpoint(&ck)
            };
            let r = commands::cmd_eval(&cfg, src)?;
            let fmt = |s: Option<commands::Summary>| s.map_or("n/a".into(), |s| format!("{:.3} ± {:.3}", s.mean, s.std));
            println!("HR MAE (BPM): {}", fmt(r.hr_mae_bpm));
            println!("LVET MAE (ms): {}", fmt(r.lvet_mae_ms));
            println!("clips with failures: {} of {}", r.failed_clips, r.n_clips);
        }
        Cmd::Ablate(c) => {
            let cfg = load(&c)?;
            let rows = commands::cmd_ablate(&cfg, &mut log)?;
            println!("wrote {} rows to {}", rows.len(), cfg.out.join("ablate").display());
        }
        Cmd::ExportPlots { common, report } => {
            let cfg = load(&common)?;
            let report = report.unwrap_or_else(|| cfg.out.join("eval").join("report.json"));
            let dir = cfg.out.join("plots");
            commands::cmd_export_plots(&report, &dir)?;
            println!("wrote plot data to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
