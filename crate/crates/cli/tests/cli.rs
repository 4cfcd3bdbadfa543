use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use focusalpha::fnt1;
use focusalpha::model::{Model, ModelConfig};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focusalpha"))
        .args(args)
        .env("FOCUSALPHA_CONFIG_DIR", configs_dir())
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = cli(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a small two-scale config and returns its path.
fn small_config(dir: &Path) -> PathBuf {
    let cfg = ModelConfig {
        scales: 2,
        widths: vec![8, 16],
        ..ModelConfig::alpha_tiny()
    };
    let path = dir.join("small.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn total_line(out: &str) -> Vec<u64> {
    out.lines()
        .find(|l| l.starts_with("total"))
        .unwrap()
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect()
}

#[test]
fn flops_totals_match_the_library() {
    let out = ok(&["flops", "--config", "alpha-tiny.json", "--size", "64", "64"]);
    let cfg = ModelConfig::load(&configs_dir().join("alpha-tiny.json")).unwrap();
    assert_eq!(cfg, ModelConfig::alpha_tiny());
    let m = Model::build(&cfg, 0).unwrap();
    assert_eq!(
        total_line(&out),
        vec![
            m.count_params() as u64,
            m.count_flops(&[1, 3, 64, 64]).unwrap()
        ]
    );
}

#[test]
fn config_directory_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::alpha_lite();
    fs::write(dir.path().join("mine.json"), cfg.to_json()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_focusalpha"))
        .args(["flops", "--config", "mine.json", "--size", "32", "32"])
        .env("FOCUSALPHA_CONFIG_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let params = Model::build(&cfg, 0).unwrap().count_params() as u64;
    assert_eq!(total_line(&stdout(&o))[0], params);
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--instances", "1"]);
    assert!(out.lines().last().unwrap().starts_with("total"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    let o = cli(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

#[test]
fn bad_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"scales": 4, "widthz": [1]}"#).unwrap();
    let o = cli(&["flops", "--config", p(&path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));
}

#[test]
fn train_with_missing_data_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = cli(&[
        "train",
        "--config",
        "alpha-tiny.json",
        "--data",
        p(&dir.path().join("absent")),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[data]:"), "{}", stderr(&o));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&[
        "gen-data",
        "--out",
        p(&data),
        "--count",
        "6",
        "--size",
        "16",
        "16",
        "--seed",
        "2",
    ]);
    for f in ["images.fnt1", "masks.fnt1", "meta.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let train_args = [
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--batch",
        "2",
        "--epochs",
        "2",
        "--seed",
        "1",
    ];
    let out = ok(&train_args);
    assert!(out.contains("epoch   1"));
    for f in ["best.fnt1", "last.fnt1", "history.jsonl", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    // A second fresh run into the same directory is refused.
    let o = cli(&train_args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[io]:"));

    let report = dir.path().join("eval/report.json");
    let out = ok(&[
        "eval",
        "--weights",
        p(&run.join("best.fnt1")),
        "--data",
        p(&data),
        "--report",
        p(&report),
    ]);
    assert!(out.starts_with("images 6 dice "));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["images"], 6);

    let images = fnt1::load(&data.join("images.fnt1")).unwrap();
    let probs = dir.path().join("probs.fnt1");
    ok(&[
        "predict",
        "--weights",
        p(&run.join("best.fnt1")),
        "--input",
        p(&data.join("images.fnt1")),
        "--out",
        p(&probs),
    ]);
    let got = fnt1::load(&probs).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].0, "probabilities");
    assert_eq!(got[0].1.shape(), &[6, 1, 16, 16]);
    assert_eq!(images[0].1.shape(), &[6, 3, 16, 16]);
    assert!(got[0].1.data().iter().all(|&v| v > 0.0 && v < 1.0));

    // Resume to a later epoch extends the history.
    let more = [
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--batch",
        "2",
        "--epochs",
        "3",
        "--seed",
        "1",
        "--resume",
    ];
    ok(&more);
    let hist = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(hist.lines().count(), 3);
}

#[test]
fn seeded_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (d1, d2) = (dir.path().join("d1"), dir.path().join("d2"));
    ok(&[
        "gen-data",
        "--out",
        p(&d1),
        "--count",
        "4",
        "--size",
        "16",
        "16",
        "--seed",
        "7",
    ]);
    ok(&[
        "gen-data",
        "--out",
        p(&d2),
        "--count",
        "4",
        "--size",
        "16",
        "16",
        "--seed",
        "7",
    ]);
    for f in ["images.fnt1", "masks.fnt1", "meta.json"] {
        assert_eq!(
            fs::read(d1.join(f)).unwrap(),
            fs::read(d2.join(f)).unwrap(),
            "{f}"
        );
    }
    let train = |out: &Path| {
        ok(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&d1),
            "--out",
            p(out),
            "--batch",
            "2",
            "--max-steps",
            "3",
            "--seed",
            "4",
            "--loss",
            "hl",
        ])
    };
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    assert_eq!(train(&r1), train(&r2).replace(p(&r2), p(&r1)));
    assert_eq!(
        fs::read(r1.join("last.fnt1")).unwrap(),
        fs::read(r2.join("last.fnt1")).unwrap()
    );
}

#[test]
fn predict_rejects_multi_tensor_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&[
        "gen-data",
        "--out",
        p(&data),
        "--count",
        "2",
        "--size",
        "16",
        "16",
        "--val-fraction",
        "0",
    ]);
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--max-steps",
        "1",
    ]);
    let t = focusalpha::Tensor::zeros(&[1, 3, 16, 16]);
    let two = dir.path().join("two.fnt1");
    fnt1::save(&two, &[("a", &t), ("b", &t)]).unwrap();
    let o = cli(&[
        "predict",
        "--weights",
        p(&run.join("best.fnt1")),
        "--input",
        p(&two),
        "--out",
        p(&dir.path().join("o.fnt1")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[data]:"), "{}", stderr(&o));
}
