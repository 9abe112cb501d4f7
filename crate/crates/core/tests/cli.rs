use std::process::{Command, Output};

fn beamtrack(args: &[&str], dir: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamtrack"))
        .args(args)
        .current_dir(dir)
        .env_remove("BEAMTRACK_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_writes_a_readable_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = beamtrack(
        &["gen-data", "--preset", "desk", "--seed", "1", "--set", "n_train=6", "--out", "d.bin"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ds = beamtrack::dataset::read_dataset(&dir.path().join("d.bin")).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.scene().n_beams, 16);
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = beamtrack(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn sweep_without_checkpoints_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = beamtrack(&["sweep", "--axis", "noise_factor", "--preset", "desk", "--out-dir", "out"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("missing") && e.contains(".ckpt"), "{e}");
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = beamtrack(&["selftest"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("0 failed") && !out.contains("[FAIL]"), "{out}");
}

#[test]
fn bad_config_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "Q = 16\n\nepochs = abc\n").unwrap();
    let o = beamtrack(&["gen-data", "--config", "bad.cfg", "--out", "d.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!dir.path().join("d.bin").exists());
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--preset", "desk", "--set", "n_slots=2", "--set", "n_train=8", "--set", "epochs=1"];
    let mut gen = vec!["gen-data", "--out", "d.bin"];
    gen.extend(common);
    assert_eq!(beamtrack(&gen, dir.path()).status.code(), Some(0));
    let mut train = vec!["train", "--data", "d.bin", "--model", "lstm", "--out-dir", "o"];
    train.extend(common);
    let o = beamtrack(&train, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("o/lstm.ckpt").is_file());
    assert!(dir.path().join("o/lstm_loss.csv").is_file());

    let mut eval = vec!["eval", "--checkpoint", "o/lstm.ckpt", "--data", "d.bin", "--model", "lstm", "--out-dir", "o"];
    eval.extend(common);
    let o = beamtrack(&eval, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("slot,tbar_0.100000"));

    let mut wrong = vec!["eval", "--checkpoint", "o/lstm.ckpt", "--data", "d.bin", "--model", "lnn"];
    wrong.extend(common);
    let o = beamtrack(&wrong, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lstm"));
}
