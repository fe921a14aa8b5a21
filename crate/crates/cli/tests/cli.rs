//! Exit codes, diagnostics and plot output of the `sasv` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sasv_core::config::ExperimentConfig;
use sasv_core::eval::{write_scores, ScoreRecord};
use sasv_core::protocol::{TrialPair, TrialType};

fn sasv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sasv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

#[test]
fn unknown_flag_is_a_one_line_failure() {
    let o = sasv(&["train", "--bogus"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("--bogus"), "{err}");
}

#[test]
fn malformed_config_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.conf");
    fs::write(&path, "# experiment\nexperiment.name = x\ntrain.epochs = many\n").unwrap();
    let o = sasv(&["generate-data", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:") && err.contains("broken.conf:3"), "{err}");

    fs::write(&path, "no equals sign here\n").unwrap();
    let o = sasv(&["pretrain", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("broken.conf:1"));

    let o = sasv(&["report", "--config", dir.path().join("absent.conf").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_before_train_reports_a_missing_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let o = sasv(&["evaluate", "--out", dir.path().to_str().unwrap(), "--mode", "joint"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("missing model bundle"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn shipped_config_is_the_default() {
    let shipped = ExperimentConfig::load(&shipped_config()).unwrap();
    assert_eq!(shipped, ExperimentConfig::default());
    let o = sasv(&["default-config"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), fs::read_to_string(shipped_config()).unwrap());
}

#[test]
fn generate_data_writes_corpora_and_a_config_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("small.conf");
    let mut cfg = ExperimentConfig::default();
    for role in ["asv_pretrain", "base_train", "base_dev", "base_eval", "aux_train"] {
        cfg.set(&format!("corpus.{role}.n_speakers"), "4").unwrap();
        cfg.set(&format!("corpus.{role}.n_bonafide"), "12").unwrap();
        cfg.set(&format!("corpus.{role}.signal_length"), "200").unwrap();
        if role != "asv_pretrain" {
            cfg.set(&format!("corpus.{role}.n_spoofed"), "24").unwrap();
        }
    }
    cfg.set("trials.dev_counts", "4,4,4,2").unwrap();
    cfg.set("trials.eval_counts", "4,4,4,2").unwrap();
    cfg.save(&conf).unwrap();
    let out = dir.path().join("out");
    let o = sasv(&["generate-data", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "4,9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let root = out.join(&cfg.name);
    assert!(root.join("data").join("dev.protocol").is_file());
    assert!(root.join("data").join("eval.protocol").is_file());
    let snapshot = ExperimentConfig::load(&root.join("config")).unwrap();
    assert_eq!(snapshot.seeds, vec![4, 9]);
    assert_eq!(snapshot.output_dir, out);
    assert_eq!((&snapshot.asv_pretrain, &snapshot.base_eval), (&cfg.asv_pretrain, &cfg.base_eval));
}

fn score_file(path: &Path, types: &[TrialType]) {
    let mut recs = Vec::new();
    for (k, &t) in types.iter().enumerate() {
        for i in 0..30 {
            let x = (i as f64 * 0.37 + k as f64).sin();
            recs.push(ScoreRecord {
                trial: TrialPair::new(format!("e{k}{i}"), format!("t{k}{i}"), t),
                full: x + if t == TrialType::T1 { 1.0 } else { 0.0 },
                asv: x,
                cm: -x,
            });
        }
    }
    write_scores::<f64>(&recs, path).unwrap();
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn plot_writes_six_deterministic_images_per_file() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("eval.scores");
    score_file(&scores, &[TrialType::T1, TrialType::T2, TrialType::T3, TrialType::T4]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = sasv(&["plot", scores.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let names = listing(&a);
    assert_eq!(names.len(), 6);
    for stream in ["full", "asv", "cm"] {
        for kind in ["hist", "far_frr"] {
            assert!(names.contains(&format!("eval.{stream}.{kind}.png")), "{names:?}");
        }
    }
    assert_eq!(names, listing(&b));
    for n in &names {
        let bytes = fs::read(a.join(n)).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert_eq!(bytes, fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn plot_warns_about_empty_trial_types() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("fixed.scores");
    score_file(&scores, &[TrialType::T1, TrialType::T2, TrialType::T3]);
    let out = dir.path().join("plots");
    let o = sasv(&["plot", scores.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let err = stderr(&o);
    assert!(err.contains("no T4 trials"), "{err}");
    assert_eq!(listing(&out).len(), 6);

    fs::write(&scores, "not a score line\n").unwrap();
    let o = sasv(&["plot", scores.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
