use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pointvector"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(epochs: usize, extra_train: &str, ablate: &str) -> String {
    format!(
        r#"{{
  "model": {{ "task": "segmentation", "num_classes": 3, "embed_channels": 8, "k_sa": 8, "k_vpsa": 4 }},
  "train": {{ "epochs": {epochs}, "batch_size": 2, "lr0": 0.01 {extra_train} }},
  "data": {{ "scene": {{ "num_points": 64, "seed": 3 }}, "train_scenes": 4, "val_scenes": 2 }},
  "ablate": {{ {ablate} }}
}}"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_run_directory() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "toy.json", &tiny_config(2, "", ""));
    let out = tmp.path().join("run");
    let o = run(&["train", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "metrics.csv", "best.ckpt", "log.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for e in 0..2 {
        for split in ["train", "val"] {
            assert!(rows.iter().any(|r| r.starts_with(&format!("{e},{split},"))), "{csv}");
        }
    }
}

#[test]
fn missing_config_exits_2_naming_path() {
    let o = run(&["train", "/nonexistent/cfg.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/cfg.json"), "{}", stderr(&o));
}

#[test]
fn negative_learning_rate_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.json",
        &tiny_config(2, "", "").replace("\"lr0\": 0.01", "\"lr0\": -1"),
    );
    let o = run(&["train", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lr0"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "bad.json", &tiny_config(2, ", \"lr\": 0.1", ""));
    let o = run(&["train", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn existing_run_dir_needs_overwrite() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "toy.json", &tiny_config(1, "", ""));
    let out = tmp.path().join("run");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let o = run(&["train", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(out.join("keep.txt").exists());
    let o = run(&["--overwrite", "train", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!out.join("keep.txt").exists());
}

fn ablate_csv(cfg: &Path, out: &Path, jobs: &str) -> String {
    let o = run(&["--jobs", jobs, "ablate", s(cfg), "--out", s(out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::read_to_string(out.join("ablate.csv")).unwrap()
}

#[test]
fn ablation_over_vector_dim() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "abl.json",
        &tiny_config(1, "", "\"vector_dim\": [1, 2, 3]"),
    );
    let csv = ablate_csv(&cfg, &tmp.path().join("a"), "1");
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3, "{csv}");
    let ms: Vec<&str> = rows.iter().map(|r| r[2]).collect();
    assert_eq!(ms, ["1", "2", "3"]);
    let params: Vec<usize> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]), "{params:?}");

    let again = ablate_csv(&cfg, &tmp.path().join("b"), "2");
    assert_eq!(csv, again);
}

#[test]
fn ablation_single_cell() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "one.json", &tiny_config(1, "", ""));
    let csv = ablate_csv(&cfg, &tmp.path().join("a"), "1");
    assert_eq!(csv.lines().count(), 2, "{csv}");
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let o = run(&["gradcheck", "--instances", "2"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let o = run(&["gradcheck", "--instances", "2", "--inject-fault"]);
    assert_eq!(code(&o), 4, "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn eval_suite_and_checkpoint_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "toy.json", &tiny_config(2, "", ""));
    let out = tmp.path().join("run");
    let o = run(&["train", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = out.join("best.ckpt");

    let table = tmp.path().join("eval.csv");
    let o = run(&["eval", s(&ckpt), "--config", s(&cfg), "--csv", s(&table)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&table).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 10, "{text}");
    assert_eq!(header[1], "none");

    // The clean column equals the best validation row of training.
    let miou_line = text.lines().find(|l| l.starts_with("miou,")).unwrap();
    let clean_miou: f64 = miou_line.split(',').nth(1).unwrap().parse().unwrap();
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let val_miou: Vec<f64> = metrics
        .lines()
        .filter(|l| l.contains(",val,"))
        .map(|l| l.split(',').nth(6).unwrap().parse().unwrap())
        .collect();
    assert!(val_miou.contains(&clean_miou), "{clean_miou} not in {val_miou:?}");

    let bad = write(tmp.path(), "bad.ckpt", "not a checkpoint");
    let o = run(&["eval", s(&bad), "--config", s(&cfg), "--suite", "none"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    let flipped = tmp.path().join("flipped.ckpt");
    fs::write(&flipped, bytes).unwrap();
    let o = run(&["eval", s(&flipped), "--config", s(&cfg), "--suite", "none"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn gen_data_round_trips_through_train() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let o = run(&[
        "gen-data", "--out", s(&data), "--train", "4", "--val", "2", "--test", "2", "--points", "64",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(data.join("manifest.txt").is_file());
    let cfg = tiny_config(1, "", "").replace(
        "\"data\": {",
        &format!("\"data\": {{ \"manifest\": \"{}\",", s(&data.join("manifest.txt"))),
    );
    let cfg = write(tmp.path(), "m.json", &cfg);
    let o = run(&["train", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&[
        "eval",
        s(&tmp.path().join("run/best.ckpt")),
        "--config",
        s(&cfg),
        "--split",
        "test",
        "--suite",
        "none",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn bench_reports_timings() {
    let o = run(&["bench", "--points", "64", "--batch", "2", "--iters", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("forward"));
}
