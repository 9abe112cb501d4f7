//! Sweeps over slot index, prediction instant and noise figure, and the
//! end-to-end experiment that produces their inputs.
//!
//! Directory layout under the output directory:
//!
//! ```text
//! seed_<s>/nf_<N_F>/{train.bin, val.bin, <kind>.ckpt, <kind>_loss.csv}
//! training_instant.csv | prediction_instant.csv | noise_factor.csv
//! summary.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{checkpoint_path, evaluate, fmt_sig, initial_model, train_to_dir, EvalReport, RunConfig};
use crate::dataset::{generate_dataset, read_dataset, write_dataset};
use crate::models::{ModelKind, TrackerModel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    TrainingInstant,
    PredictionInstant,
    NoiseFactor,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::TrainingInstant, Axis::PredictionInstant, Axis::NoiseFactor];

    pub fn name(self) -> &'static str {
        match self {
            Axis::TrainingInstant => "training_instant",
            Axis::PredictionInstant => "prediction_instant",
            Axis::NoiseFactor => "noise_factor",
        }
    }

    fn column(self) -> &'static str {
        match self {
            Axis::TrainingInstant => "slot",
            Axis::PredictionInstant => "tbar",
            Axis::NoiseFactor => "noise_figure_db",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "training_instant" | "slot" => Ok(Axis::TrainingInstant),
            "prediction_instant" | "tbar" => Ok(Axis::PredictionInstant),
            "noise_factor" | "nf" => Ok(Axis::NoiseFactor),
            other => Err(Error::Argument(format!(
                "unknown axis '{other}' (expected training_instant, prediction_instant or noise_factor)"
            ))),
        }
    }
}

pub fn run_dir(out: &Path, seed: u64, noise_figure_db: f64) -> PathBuf {
    out.join(format!("seed_{seed}")).join(format!("nf_{noise_figure_db}"))
}

/// Swept noise figures plus the base one, ascending.
pub fn noise_levels(cfg: &RunConfig) -> Vec<f64> {
    let mut v = cfg.noise_factors.clone();
    v.push(cfg.scene.noise_figure_db);
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

#[derive(Clone, Debug)]
pub struct ReportEntry {
    pub seed: u64,
    pub noise_figure_db: f64,
    pub kind: ModelKind,
    pub report: EvalReport,
}

/// Validation reports of every trained model.
#[derive(Clone, Debug, Default)]
pub struct Reports {
    pub entries: Vec<ReportEntry>,
}

impl Reports {
    pub fn get(&self, seed: u64, nf: f64, kind: ModelKind) -> Option<&EvalReport> {
        self.entries
            .iter()
            .find(|e| e.seed == seed && e.noise_figure_db == nf && e.kind == kind)
            .map(|e| &e.report)
    }

    fn seed_mean(&self, cfg: &RunConfig, nf: f64, kind: ModelKind, f: impl Fn(&EvalReport) -> Vec<f64>) -> Result<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for &s in &cfg.seeds {
            let r = self
                .get(s, nf, kind)
                .ok_or_else(|| Error::Data(format!("no report for seed {s}, N_F {nf}, {kind}")))?;
            let v = f(r);
            acc = Some(match acc {
                None => v,
                Some(a) => a.iter().zip(&v).map(|(x, y)| x + y).collect(),
            });
        }
        let n = cfg.seeds.len() as f64;
        Ok(acc.unwrap_or_default().into_iter().map(|v| v / n).collect())
    }
}

fn model_dir(cfg: &RunConfig, seed: u64, nf: f64) -> PathBuf {
    let train_nf = if cfg.retrain_per_noise { nf } else { cfg.scene.noise_figure_db };
    run_dir(&cfg.out_dir, seed, train_nf)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::file(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing {what}")),
        ))
    }
}

/// Loads every checkpoint the axis needs and evaluates it on the matching
/// validation set. Missing files are reported before any evaluation.
pub fn collect_reports(cfg: &RunConfig, axes: &[Axis]) -> Result<Reports> {
    let levels = if axes.contains(&Axis::NoiseFactor) {
        noise_levels(cfg)
    } else {
        vec![cfg.scene.noise_figure_db]
    };
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        for &nf in &levels {
            let val = run_dir(&cfg.out_dir, seed, nf).join("val.bin");
            for kind in ModelKind::ALL {
                let ck = checkpoint_path(&model_dir(cfg, seed, nf), kind);
                require(&ck, &format!("{kind} checkpoint"))?;
                jobs.push((seed, nf, kind, ck, val.clone()));
            }
            require(&val, "validation dataset")?;
        }
    }
    let mut reports = Reports::default();
    let mut cached: Option<(PathBuf, crate::dataset::Dataset)> = None;
    for (seed, nf, kind, ck, val) in jobs {
        if cached.as_ref().map(|c| &c.0) != Some(&val) {
            cached = Some((val.clone(), read_dataset(&val)?));
        }
        let ds = &cached.as_ref().expect("loaded above").1;
        let model = TrackerModel::<f32>::load(&ck)?;
        if model.kind != kind {
            return Err(Error::Config(format!("{} holds a {} model", ck.display(), model.kind)));
        }
        reports.entries.push(ReportEntry {
            seed,
            noise_figure_db: nf,
            kind,
            report: evaluate(&model, ds)?,
        });
    }
    Ok(reports)
}

/// One figure: axis values and a seed-averaged SE_N column per model.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub columns: Vec<(ModelKind, Vec<f64>)>,
}

impl SweepTable {
    pub fn column(&self, kind: ModelKind) -> Option<&[f64]> {
        self.columns.iter().find(|c| c.0 == kind).map(|c| c.1.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.axis.column().to_string();
        for (k, _) in &self.columns {
            let _ = write!(s, ",{}", k.name());
        }
        s.push('\n');
        for (r, v) in self.values.iter().enumerate() {
            if self.axis == Axis::TrainingInstant {
                let _ = write!(s, "{}", *v as usize);
            } else {
                s.push_str(&fmt_sig(*v));
            }
            for (_, col) in &self.columns {
                let _ = write!(s, ",{}", fmt_sig(col[r]));
            }
            s.push('\n');
        }
        s
    }
}

pub fn table(cfg: &RunConfig, reports: &Reports, axis: Axis) -> Result<SweepTable> {
    let base = cfg.scene.noise_figure_db;
    let mut columns = Vec::new();
    let values: Vec<f64> = match axis {
        Axis::TrainingInstant => (1..=cfg.scene.n_slots).map(|i| i as f64).collect(),
        Axis::PredictionInstant => cfg.grid.clone(),
        Axis::NoiseFactor => noise_levels(cfg),
    };
    for kind in ModelKind::ALL {
        let col = match axis {
            Axis::TrainingInstant => reports.seed_mean(cfg, base, kind, |r| r.by_slot.clone())?,
            // One prediction per slot: the slot-level score applies at every instant.
            Axis::PredictionInstant if !kind.uses_instant() => {
                reports.seed_mean(cfg, base, kind, |r| vec![r.overall; r.by_tbar.len()])?
            }
            Axis::PredictionInstant => reports.seed_mean(cfg, base, kind, |r| r.by_tbar.clone())?,
            Axis::NoiseFactor => values
                .iter()
                .map(|&nf| Ok(reports.seed_mean(cfg, nf, kind, |r| vec![r.overall])?[0]))
                .collect::<Result<Vec<_>>>()?,
        };
        columns.push((kind, col));
    }
    Ok(SweepTable { axis, values, columns })
}

pub fn write_table(dir: &Path, t: &SweepTable) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let path = dir.join(format!("{}.csv", t.axis.name()));
    std::fs::write(&path, t.to_csv()).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

/// Evaluates existing checkpoints along `axis` and writes its CSV.
pub fn sweep(cfg: &RunConfig, axis: Axis) -> Result<SweepTable> {
    let reports = collect_reports(cfg, &[axis])?;
    let t = table(cfg, &reports, axis)?;
    write_table(&cfg.out_dir, &t)?;
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub reports: Reports,
    /// Untrained LNN per seed at the base noise figure.
    pub untrained: Vec<(u64, EvalReport)>,
    pub tables: Vec<SweepTable>,
}

impl ExperimentSummary {
    pub fn table(&self, axis: Axis) -> &SweepTable {
        self.tables.iter().find(|t| t.axis == axis).expect("all axes tabulated")
    }
}

/// Generates data, trains every model for every seed and noise figure,
/// evaluates, and writes all sweep CSVs.
pub fn run_experiment(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let base = cfg.scene.noise_figure_db;
    for &seed in &cfg.seeds {
        for nf in noise_levels(cfg) {
            let dir = run_dir(&cfg.out_dir, seed, nf);
            std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
            let mut run = cfg.clone();
            run.scene.noise_figure_db = nf;
            let (train, val) = generate_dataset(&run.scene, &run.grid, run.n_train, run.n_val, seed)?;
            write_dataset(&dir.join("train.bin"), &train)?;
            write_dataset(&dir.join("val.bin"), &val)?;
            if !cfg.retrain_per_noise && nf != base {
                continue;
            }
            for kind in ModelKind::ALL {
                let t0 = std::time::Instant::now();
                let out = train_to_dir(&run, &train, kind, seed, &dir)?;
                log(&format!(
                    "seed {seed} N_F {nf} {kind}: loss {} -> {} in {:.1?}",
                    fmt_sig(out.losses[0]),
                    fmt_sig(*out.losses.last().unwrap_or(&f64::NAN)),
                    t0.elapsed()
                ));
            }
        }
    }
    let reports = collect_reports(cfg, &Axis::ALL)?;
    let mut untrained = Vec::new();
    for &seed in &cfg.seeds {
        let val = read_dataset(&run_dir(&cfg.out_dir, seed, base).join("val.bin"))?;
        let model = initial_model(ModelKind::Lnn, cfg, seed)?;
        untrained.push((seed, evaluate(&model, &val)?));
    }
    let mut tables = Vec::new();
    for axis in Axis::ALL {
        let t = table(cfg, &reports, axis)?;
        write_table(&cfg.out_dir, &t)?;
        tables.push(t);
    }
    let mut summary = String::from("seed,noise_figure_db,model,se_n\n");
    for e in &reports.entries {
        let _ = writeln!(summary, "{},{},{},{}", e.seed, e.noise_figure_db, e.kind, fmt_sig(e.report.overall));
    }
    for (seed, r) in &untrained {
        let _ = writeln!(summary, "{seed},{base},lnn-untrained,{}", fmt_sig(r.overall));
    }
    let path = cfg.out_dir.join("summary.csv");
    std::fs::write(&path, summary).map_err(|e| Error::file(&path, e))?;
    Ok(ExperimentSummary {
        reports,
        untrained,
        tables,
    })
}
