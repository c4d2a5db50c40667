use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mccl::config::RunConfig;
use mccl::eval::estimate_k;
use mccl::features::FILE_MAGIC;
use mccl::trainer::checkpoint::{encode_checkpoint, load_checkpoint};
use mccl::trainer::{initial_params, METRICS_HEADER};
use mccl::{generate_synthetic, load_dataset, save_dataset, ModelParamsF32};

const SMALL: &str = "\
data.samples_per_class = 20
model.hidden = 16
model.embed_dim = 8
train.batch_size = 32
train.epochs_stage1 = 2
train.epochs_stage2 = 2
";

fn mccl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mccl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mccl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `SMALL` with the keys in `extra` replaced or added.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = SMALL
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

/// gen then train; returns the data and checkpoint paths.
fn gen_and_train(dir: &Path, cfg: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data.vgcd");
    let ckpt = dir.join("model.ckpt");
    let metrics = dir.join("metrics.csv");
    ok(&["gen", "--config", s(cfg), "--out", s(&data)]);
    ok(&[
        "train",
        "--config",
        s(cfg),
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--metrics",
        s(&metrics),
    ]);
    (data, ckpt)
}

#[test]
fn gen_writes_a_feature_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("d.vgcd");
    let stdout = ok(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(stdout.trim(), "8 classes, 160 records");
    let bytes = std::fs::read(&data).unwrap();
    assert_eq!(bytes[..4], FILE_MAGIC);
    assert_eq!(load_dataset(&data).unwrap().len(), 160);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "loss.lambda_typo = 0.3\n");
    let out = mccl(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("d.vgcd"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_typo"));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("d.vgcd");
    ok(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    let out = mccl(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("absent.ckpt")),
        "--data",
        s(&data),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn zero_epochs_writes_initial_parameters_and_header_only_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "train.epochs_stage1 = 0\ntrain.epochs_stage2 = 0\n");
    let (data, ckpt) = gen_and_train(dir.path(), &cfg_path);
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let ds = load_dataset(&data).unwrap();
    let expected = encode_checkpoint(&initial_params::<f32>(&ds, &cfg.train));
    assert_eq!(std::fs::read(&ckpt).unwrap(), expected);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, format!("{METRICS_HEADER}\n"));
}

#[test]
fn sidecar_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "vote.eta = 0.25\nloss.kl_order = student_first\n");
    let (_, ckpt) = gen_and_train(dir.path(), &cfg_path);
    let original = RunConfig::load(&cfg_path).unwrap();
    let mut side = ckpt.into_os_string();
    side.push(".config");
    assert_eq!(RunConfig::load(PathBuf::from(side)).unwrap(), original);
}

#[test]
fn estimated_k_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "");
    let (data, ckpt) = gen_and_train(dir.path(), &cfg_path);
    let stdout = ok(&[
        "eval",
        "--config",
        s(&cfg_path),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--estimate-k",
        "--grid",
        "4..12",
    ]);
    let json: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let ds = load_dataset(&data).unwrap();
    let params: ModelParamsF32 = load_checkpoint(&ckpt).unwrap();
    let grid: Vec<usize> = (4..=12).collect();
    let expected = estimate_k(&ds, &params, &grid, &cfg.eval_config()).unwrap().k;
    assert_eq!(json["k_used"].as_u64(), Some(expected as u64));
    for key in ["all_acc", "old_acc", "new_acc"] {
        let v = json[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn duplicated_record_gets_every_vote() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "");
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let mut ds = generate_synthetic(&cfg.data).unwrap();
    let mut copy = ds.records[3].clone();
    copy.id = 10_000;
    ds.records.push(copy);
    let data = dir.path().join("dup.vgcd");
    save_dataset(&ds, &data).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    ok(&[
        "train",
        "--config",
        s(&cfg_path),
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--metrics",
        s(&dir.path().join("metrics.csv")),
    ]);
    let prefix = dir.path().join("votes");
    ok(&[
        "vote",
        "--config",
        s(&cfg_path),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&prefix),
    ]);
    let csv = std::fs::read_to_string(dir.path().join("votes.w.csv")).unwrap();
    let rows: Vec<Vec<u32>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let n = ds.len();
    assert_eq!(rows.len(), n);
    let levels = cfg.train.vote.levels as u32;
    assert_eq!(rows[3][n - 1], levels);
    assert_eq!(rows[n - 1][3], levels);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[i], levels);
    }
    let c = std::fs::read_to_string(dir.path().join("votes.c.csv")).unwrap();
    assert_eq!(c.lines().count(), n + 1);
}

#[test]
fn gradcheck_exit_codes() {
    ok(&["gradcheck", "--precision", "f64"]);
    ok(&["gradcheck", "--precision", "f32"]);
    let out = mccl(&["gradcheck", "--corrupt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("projector.1.w"));
}

#[test]
fn runs_are_byte_identical_across_thread_counts() {
    let run = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "");
        let data = dir.path().join("data.vgcd");
        let ckpt = dir.path().join("model.ckpt");
        let metrics = dir.path().join("metrics.csv");
        ok(&["--threads", threads, "gen", "--config", s(&cfg), "--out", s(&data)]);
        ok(&[
            "--threads",
            threads,
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&ckpt),
            "--metrics",
            s(&metrics),
        ]);
        let report = ok(&[
            "--threads",
            threads,
            "eval",
            "--config",
            s(&cfg),
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
        ]);
        (
            std::fs::read(&data).unwrap(),
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(&metrics).unwrap(),
            report,
        )
    };
    let a = run("1");
    let b = run("1");
    let c = run("3");
    assert!(a == b, "repeat run differs");
    assert!(a == c, "thread count changes output");
}
