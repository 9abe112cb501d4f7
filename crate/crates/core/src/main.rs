use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use beamtrack::dataset::{generate_split, read_dataset, write_dataset, Split};
use beamtrack::harness::checks::{self, CheckResult};
use beamtrack::harness::sweep::{run_experiment, sweep, Axis};
use beamtrack::harness::{evaluate, fmt_sig, train_to_dir, Preset, RunConfig};
use beamtrack::models::{shape_audit, ModelDims, TrackerModel};
use beamtrack::{Error, Result};

#[derive(Parser)]
#[command(name = "beamtrack", version, about = "Continuous-time mmWave beam tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting preset (full or desk), applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (the BEAMTRACK_OUT_DIR variable takes precedence).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Seed (replaces the configured seed list).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file.
    GenData {
        /// Destination dataset file.
        #[arg(long)]
        out: PathBuf,
        /// train or val.
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on a dataset file.
    Train {
        /// Training dataset file.
        #[arg(long)]
        data: PathBuf,
        /// lnn, lstm or ode-lstm (overrides the config).
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Validation dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Expected model kind; must match the checkpoint.
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Write one sweep CSV from existing checkpoints.
    Sweep {
        /// training_instant, prediction_instant or noise_factor.
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks of every operation and model.
    Gradcheck,
    /// Channel, CfC and LTC property checks.
    Selftest,
    /// Generate data, train all models, evaluate and write every sweep.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn config(common: &Common) -> Result<RunConfig> {
    let base = match &common.preset {
        Some(p) => RunConfig::preset(p.parse::<Preset>()?),
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(d) = &common.out_dir {
        overrides.push(("out_dir".into(), d.display().to_string()));
    }
    if let Some(s) = common.seed {
        overrides.push(("seeds".into(), s.to_string()));
    }
    RunConfig::load_over(base, common.config.as_deref(), &overrides)
}

fn report_checks(results: &[CheckResult]) -> bool {
    for r in results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    failed == 0
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { out, split, common } => {
            let cfg = config(&common)?;
            let (split, n) = match split.as_str() {
                "train" => (Split::Train, cfg.n_train),
                "val" | "validation" => (Split::Validation, cfg.n_val),
                other => return Err(Error::Argument(format!("unknown split '{other}'"))),
            };
            let ds = generate_split(&cfg.scene, &cfg.grid, split, n, cfg.seeds[0], true)?;
            write_dataset(&out, &ds)?;
            println!("wrote {} episodes to {}", ds.len(), out.display());
        }
        Command::Train { data, model, common } => {
            let mut cfg = config(&common)?;
            if let Some(m) = model {
                cfg.model = m.parse()?;
            }
            shape_audit(&ModelDims::standard(cfg.scene.n_beams)?)?;
            let ds = read_dataset(&data)?;
            ensure_dir(&cfg.out_dir)?;
            let out = train_to_dir(&cfg, &ds, cfg.model, cfg.seeds[0], &cfg.out_dir)?;
            for (e, l) in out.losses.iter().enumerate() {
                println!("epoch {e}: loss {}", fmt_sig(*l));
            }
        }
        Command::Eval {
            checkpoint,
            data,
            model,
            common,
        } => {
            let mut cfg = config(&common)?;
            if let Some(m) = model {
                cfg.model = m.parse()?;
            }
            let m = TrackerModel::<f32>::load(&checkpoint)?;
            if m.kind != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint holds a {} model but the config asks for {}",
                    m.kind, cfg.model
                )));
            }
            let ds = read_dataset(&data)?;
            let report = evaluate(&m, &ds)?;
            ensure_dir(&cfg.out_dir)?;
            let path = cfg.out_dir.join(format!("{}_eval.csv", m.kind.name()));
            std::fs::write(&path, report.to_csv()).map_err(|e| Error::file(&path, e))?;
            print!("{}", report.to_csv());
        }
        Command::Sweep { axis, common } => {
            let cfg = config(&common)?;
            let t = sweep(&cfg, axis.parse::<Axis>()?)?;
            print!("{}", t.to_csv());
        }
        Command::Gradcheck => {
            return Ok(report_checks(&checks::gradient_suite()?));
        }
        Command::Selftest => {
            return Ok(report_checks(&checks::selftest()?));
        }
        Command::Experiment { common } => {
            let cfg = config(&common)?;
            shape_audit(&ModelDims::standard(cfg.scene.n_beams)?)?;
            let summary = run_experiment(&cfg, &mut |m| eprintln!("{m}"))?;
            for t in &summary.tables {
                println!("{}:\n{}", t.axis.name(), t.to_csv());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
