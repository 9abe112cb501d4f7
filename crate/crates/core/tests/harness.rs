use std::sync::Mutex;

use beamtrack::channel::SceneConfig;
use beamtrack::dataset::{default_grid, generate_split, Dataset, Split};
use beamtrack::harness::sweep::{collect_reports, sweep, table, Axis, ReportEntry, Reports};
use beamtrack::harness::*;
use beamtrack::models::ModelKind;
use beamtrack::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tests that touch the output-directory variable must not interleave.
static ENV_LOCK: Mutex<()> = Mutex::new(());

fn small_cfg(out: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::preset(Preset::Desk);
    c.scene.n_slots = 3;
    c.epochs = 2;
    c.batch_size = 8;
    c.n_train = 24;
    c.n_val = 8;
    c.seeds = vec![1];
    c.noise_factors = vec![13.0];
    c.out_dir = out.to_path_buf();
    c
}

fn small_set(cfg: &RunConfig, n: usize, seed: u64) -> Dataset {
    generate_split(&cfg.scene, &cfg.grid, Split::Train, n, seed, true).unwrap()
}

#[test]
fn config_text_examples() {
    let c = RunConfig::from_text("Q = 64\n").unwrap();
    assert_eq!(c.scene.n_beams, 64);
    match RunConfig::from_text("epochs = abc") {
        Err(Error::Parse { line: 1, msg }) => assert!(msg.contains("epochs")),
        other => panic!("{other:?}"),
    }
    let d = RunConfig::default();
    assert_eq!((d.epochs, d.batch_size, d.learning_rate), (100, 32, 3e-5));
    assert_eq!(d.grid, default_grid());
}

#[test]
fn flags_alone_need_no_file() {
    let _g = ENV_LOCK.lock().unwrap();
    let c = RunConfig::load(None, &[("lr".into(), "0.01".into()), ("model".into(), "ode-lstm".into())]).unwrap();
    assert_eq!((c.learning_rate, c.model), (0.01, ModelKind::OdeLstm));
}

#[test]
fn flags_override_the_file_and_env_overrides_out_dir() {
    let _g = ENV_LOCK.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "epochs = 7\nbatch_size = 4\nout_dir = from_file\n").unwrap();
    let c = RunConfig::load(Some(&path), &[("epochs".into(), "9".into())]).unwrap();
    assert_eq!((c.epochs, c.batch_size), (9, 4));
    assert_eq!(c.out_dir, std::path::PathBuf::from("from_file"));
    std::env::set_var(OUT_DIR_ENV, "/tmp/elsewhere");
    let c = RunConfig::load(Some(&path), &[]).unwrap();
    std::env::remove_var(OUT_DIR_ENV);
    assert_eq!(c.out_dir, std::path::PathBuf::from("/tmp/elsewhere"));
    let missing = RunConfig::load(Some(&dir.path().join("nope.cfg")), &[]);
    assert!(matches!(missing, Err(Error::File { .. })));
}

#[test]
fn unknown_key_error_lists_the_valid_keys() {
    let msg = RunConfig::from_text("\nwidth = 3").unwrap_err().to_string();
    assert!(msg.contains("line 2"));
    for k in valid_keys() {
        assert!(msg.contains(k), "{k} missing from {msg}");
    }
}

#[test]
fn oracle_predictor_scores_one() {
    let cfg = small_cfg(std::path::Path::new("."));
    let ds = small_set(&cfg, 6, 2);
    let r = evaluate_with(&ds, |ep| ep.labels.clone()).unwrap();
    assert_eq!(r.overall, 1.0);
    assert!(r.cells.iter().flatten().all(|&v| v == 1.0));
}

#[test]
fn random_predictor_is_heavily_penalised_with_narrow_beams() {
    let scene = SceneConfig {
        n_paths: 1,
        n_slots: 3,
        ..SceneConfig::full()
    };
    let ds = generate_split(&scene, &default_grid(), Split::Validation, 40, 4, true).unwrap();
    let r = evaluate_with(&ds, |ep| {
        let mut rng = ChaCha8Rng::seed_from_u64(ep.seed);
        ep.labels
            .iter()
            .map(|s| s.iter().map(|_| rng.random_range(0..64)).collect())
            .collect()
    })
    .unwrap();
    assert!(r.overall < 0.5, "{}", r.overall);
    assert!(r.cells.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn evaluation_is_pure_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    let ds = small_set(&cfg, 10, 3);
    for kind in ModelKind::ALL {
        let m = initial_model(kind, &cfg, 5).unwrap();
        let a = evaluate(&m, &ds).unwrap();
        let b = evaluate(&m, &ds).unwrap();
        assert_eq!(a, b);
        assert!(a.cells.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.by_slot.len(), 3);
        assert_eq!(a.by_tbar.len(), 9);
        let mean = a.by_tbar.iter().sum::<f64>() / 9.0;
        assert!((mean - a.overall).abs() < 1e-12);
    }
}

#[test]
fn missing_stored_channels_are_data_errors() {
    let cfg = small_cfg(std::path::Path::new("."));
    let mut ds = small_set(&cfg, 2, 3);
    ds.episodes[1].channels[0].pop();
    assert!(matches!(evaluate_with(&ds, |ep| ep.labels.clone()), Err(Error::Data(_))));
}

#[test]
fn first_loss_is_near_log_q() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(dir.path());
    cfg.epochs = 1;
    let ds = small_set(&cfg, 16, 6);
    for kind in ModelKind::ALL {
        let out = train_model(&cfg, &ds, kind, 1, |_, _, _| Ok(())).unwrap();
        let ln_q = 16f64.ln();
        assert!((out.losses[0] / ln_q - 1.0).abs() < 0.1, "{kind}: {}", out.losses[0]);
        assert_eq!(out.losses.len(), 2);
    }
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    let ds = small_set(&cfg, 24, 7);
    let a = train_to_dir(&cfg, &ds, ModelKind::Lnn, 3, &dir.path().join("a")).unwrap();
    let b = train_to_dir(&cfg, &ds, ModelKind::Lnn, 3, &dir.path().join("b")).unwrap();
    let csv = |d: &str| std::fs::read_to_string(loss_csv_path(&dir.path().join(d), ModelKind::Lnn)).unwrap();
    assert_eq!(csv("a"), csv("b"));
    assert!(csv("a").starts_with("epoch,loss\n0,"));
    assert_eq!(a.model.params, b.model.params);
    let ck = |d: &str| std::fs::read(checkpoint_path(&dir.path().join(d), ModelKind::Lnn)).unwrap();
    assert_eq!(ck("a"), ck("b"));
}

#[test]
fn mismatched_dataset_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    let ds = small_set(&cfg, 4, 1);
    let mut other = cfg.clone();
    other.scene.n_beams = 64;
    other.scene.n_antennas = 64;
    let mut called = false;
    let r = train_model(&other, &ds, ModelKind::Lnn, 1, |_, _, _| {
        called = true;
        Ok(())
    });
    assert!(matches!(r, Err(Error::Config(_))));
    assert!(!called);
    let mut grid = cfg.clone();
    grid.grid = vec![0.5];
    assert!(matches!(check_compat(&grid, &ds), Err(Error::Config(_))));
}

#[test]
fn sweep_without_checkpoints_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    for axis in Axis::ALL {
        match sweep(&cfg, axis) {
            Err(e @ Error::File { .. }) => assert!(e.to_string().contains("missing"), "{e}"),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn axis_names_parse() {
    for a in Axis::ALL {
        assert_eq!(a.name().parse::<Axis>().unwrap(), a);
    }
    assert!(matches!("speed".parse::<Axis>(), Err(Error::Argument(_))));
}

#[test]
fn sweep_tables_from_trained_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(dir.path());
    cfg.epochs = 1;
    cfg.retrain_per_noise = false;
    let base = cfg.scene.noise_figure_db;
    for nf in sweep::noise_levels(&cfg) {
        let run = sweep::run_dir(&cfg.out_dir, 1, nf);
        std::fs::create_dir_all(&run).unwrap();
        let mut scene = cfg.scene.clone();
        scene.noise_figure_db = nf;
        let val = generate_split(&scene, &cfg.grid, Split::Validation, 8, 1, true).unwrap();
        beamtrack::dataset::write_dataset(&run.join("val.bin"), &val).unwrap();
        if nf == base {
            let train = small_set(&cfg, 16, 1);
            for kind in ModelKind::ALL {
                train_to_dir(&cfg, &train, kind, 1, &run).unwrap();
            }
        }
    }
    let t = sweep(&cfg, Axis::PredictionInstant).unwrap();
    assert_eq!(t.values, cfg.grid);
    let lstm = t.column(ModelKind::Lstm).unwrap();
    assert!(lstm.iter().all(|&v| v == lstm[0]), "{lstm:?}");
    let csv = std::fs::read_to_string(dir.path().join("prediction_instant.csv")).unwrap();
    assert!(csv.starts_with("tbar,lnn,lstm,ode-lstm\n0.100000,"), "{csv}");
    assert_eq!(csv.lines().count(), 10);

    let reports = collect_reports(&cfg, &Axis::ALL).unwrap();
    let nf = table(&cfg, &reports, Axis::NoiseFactor).unwrap();
    assert_eq!(nf.values, vec![9.0, 13.0]);
    let slots = table(&cfg, &reports, Axis::TrainingInstant).unwrap();
    assert_eq!(slots.values, vec![1.0, 2.0, 3.0]);
    assert!(slots.to_csv().starts_with("slot,lnn,lstm,ode-lstm\n1,"));
}

#[test]
fn seed_average_is_the_plain_mean() {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.seeds = vec![1, 2];
    cfg.noise_factors = vec![];
    let report = |v: f64| EvalReport {
        grid: vec![0.5],
        cells: vec![vec![v]; 5],
        by_slot: vec![v; 5],
        by_tbar: vec![v],
        overall: v,
        n_episodes: 1,
    };
    let mut reports = Reports::default();
    for (seed, v) in [(1, 0.5), (2, 0.9)] {
        for kind in ModelKind::ALL {
            reports.entries.push(ReportEntry {
                seed,
                noise_figure_db: 9.0,
                kind,
                report: report(v),
            });
        }
    }
    cfg.grid = vec![0.5];
    let t = table(&cfg, &reports, Axis::PredictionInstant).unwrap();
    assert!((t.column(ModelKind::Lnn).unwrap()[0] - 0.7).abs() < 1e-15);
    cfg.seeds.push(3);
    assert!(matches!(table(&cfg, &reports, Axis::NoiseFactor), Err(Error::Data(_))));
}

#[test]
fn six_significant_digits() {
    assert_eq!(fmt_sig(0.123456789), "0.123457");
    assert_eq!(fmt_sig(1.0), "1.00000");
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.4]), Some(0.5));
}
