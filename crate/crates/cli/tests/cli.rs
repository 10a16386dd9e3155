use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

const SMALL: &str = r#"{
  "variant": "mfsa_cal",
  "ma_probability": 0.0,
  "batch_size": 16,
  "total_epochs": 2,
  "warmup_epochs": 1,
  "margin_warmup_epochs": 1,
  "data": {"identities": 6, "samples_per_identity": 8, "eval_samples_per_identity": 4},
  "model": {"widths": [4, 8, 8, 16], "embedding_dim": 16}
}"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_occlusion-attn"));
    cmd.env("RUST_LOG", "error");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn occlusion-attn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    stdout(&out)
}

/// The one-line JSON error a failing command prints.
fn failure(args: &[&str]) -> Value {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = stderr(&out);
    let line = err.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The resolved config echoed at the start of `train` output.
fn echoed_config(out: &str) -> Value {
    let mut de = serde_json::Deserializer::from_str(out).into_iter::<Value>();
    de.next().unwrap().unwrap()
}

#[test]
fn missing_config_file_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.json");
    let err = failure(&["train", "--config", s(&missing), "--out-dir", s(&tmp.path().join("run"))]);
    assert!(err["error"].as_str().unwrap().contains("absent.json"), "{err}");
    assert_eq!(err["kind"], "io");
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"total_epochs": 3, "learning_rate_typo": 0.1}"#).unwrap();
    let err = failure(&["train", "--config", s(&cfg), "--out-dir", s(&tmp.path().join("run"))]);
    assert!(err["error"].as_str().unwrap().contains("learning_rate_typo"), "{err}");
}

#[test]
fn usage_errors_are_one_json_line() {
    let err = failure(&["train"]);
    assert_eq!(err["kind"], "usage");
    assert!(err["error"].as_str().unwrap().contains("--out-dir"));
    let err = failure(&["ablate", "--variants", "nonexistent", "--seeds", "0", "--out-dir", "x"]);
    assert!(err["error"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn invalid_thread_count_is_rejected() {
    let out = bin().env("OCCLUSION_ATTN_THREADS", "zero").args(["gradcheck"]).output().unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("OCCLUSION_ATTN_THREADS"));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run_dir = tmp.path().join("run");
    let out = ok(&["train", "--config", &cfg, "--variant", "baseline", "--ma", "0.5", "--seed", "3", "--out-dir", s(&run_dir)]);
    let echoed = echoed_config(&out);
    assert_eq!(echoed["variant"], "baseline");
    assert_eq!(echoed["ma_probability"], 0.5);
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["batch_size"], 16, "file values survive where no flag is given");
    let saved: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved, echoed);
}

#[test]
fn training_twice_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train", "--config", &cfg, "--out-dir", s(&a)]);
    ok(&["train", "--config", &cfg, "--out-dir", s(&b)]);
    for file in ["checkpoint.bin", "metrics.jsonl", "config.json", "model.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    ok(&["visualize", "--checkpoint", s(&a), "--out-dir", s(&a.join("vis")), "--count", "2"]);
    ok(&["visualize", "--checkpoint", s(&b.join("checkpoint.bin")), "--out-dir", s(&b.join("vis")), "--count", "2"]);
    let mut names: Vec<_> = fs::read_dir(a.join("vis")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4 * 6, "two images, clean and masked, six files each");
    for name in names {
        assert_eq!(fs::read(a.join("vis").join(&name)).unwrap(), fs::read(b.join("vis").join(&name)).unwrap());
    }
}

#[test]
fn eval_writes_and_prints_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run_dir = tmp.path().join("run");
    ok(&["train", "--config", &cfg, "--out-dir", s(&run_dir)]);
    let printed: Value = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&run_dir), "--far-grid", "0.01,0.1"])).unwrap();
    let saved: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(printed, saved);
    let tar = printed["tar_at_far"].as_object().unwrap();
    assert_eq!(tar.len(), 2);
    assert!(tar["0.01"].as_f64().unwrap() <= tar["0.1"].as_f64().unwrap());
    assert!(printed["a_um_mass_in_mask"].is_number());

    let err = failure(&["eval", "--checkpoint", s(&run_dir), "--far-grid", "0,2"]);
    assert!(err["error"].as_str().unwrap().contains("far-grid"));
}

#[test]
fn generated_folders_train_like_in_memory_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    let out = ok(&["gen-data", "--config", &cfg, "--out-dir", s(&data)]);
    assert!(out.contains("48 training"), "{out}");
    assert!(data.join("train").is_dir() && data.join("eval").is_dir());
    let (mem, disk) = (tmp.path().join("mem"), tmp.path().join("disk"));
    ok(&["train", "--config", &cfg, "--out-dir", s(&mem)]);
    ok(&["train", "--config", &cfg, "--out-dir", s(&disk), "--data-dir", s(&data)]);
    assert_eq!(
        fs::read(mem.join("checkpoint.bin")).unwrap(),
        fs::read(disk.join("checkpoint.bin")).unwrap(),
        "8-bit image folders round-trip the synthetic images exactly"
    );
}

fn ablation_json(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("ablation.json")).unwrap()).unwrap()
}

#[test]
fn ablation_counts_rows_and_matches_cell_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    let text = ok(&[
        "ablate", "--config", &cfg, "--variants", "baseline,mfsa_cal", "--seeds", "0,1,2", "--ma", "0.5",
        "--far-grid", "0.01", "--out-dir", s(&out_dir),
    ]);
    assert_eq!(text, fs::read_to_string(out_dir.join("ablation.txt")).unwrap());
    assert!(text.contains("MFSA + CAL + MA=0.5"), "{text}");
    assert!(text.contains('±'));

    let report = ablation_json(&out_dir);
    let rows = report["rows"].as_array().unwrap();
    let aggregates = report["aggregates"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(aggregates.len(), 2);

    let metrics: Vec<&str> = report["metrics"].as_array().unwrap().iter().map(|m| m.as_str().unwrap()).collect();
    let masked = metrics.iter().position(|m| *m == "masked TAR@0.01").unwrap();
    let clean = metrics.iter().position(|m| *m == "clean TAR@0.01").unwrap();
    for row in rows {
        let dir = format!("{}_seed{}", row["variant"].as_str().unwrap(), row["seed"]);
        let cell: Value = serde_json::from_str(&fs::read_to_string(out_dir.join(dir).join("report.json")).unwrap()).unwrap();
        assert_eq!(row["values"][masked], cell["tar_at_far"]["0.01"]);
        assert_eq!(row["values"][clean], cell["clean_tar_at_far"]["0.01"]);
    }
    for agg in aggregates {
        let variant = agg["variant"].as_str().unwrap();
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| r["variant"] == variant)
            .map(|r| r["values"][masked].as_f64().unwrap())
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((agg["mean"][masked].as_f64().unwrap() - mean).abs() < 1e-12);
        assert!(agg["sd"].is_array());
    }
}

#[test]
fn single_seed_ablation_has_no_sd() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    let text = ok(&["ablate", "--config", &cfg, "--variants", "cbam_cal", "--seeds", "4", "--out-dir", s(&out_dir)]);
    assert!(!text.contains('±'), "{text}");
    let report = ablation_json(&out_dir);
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);
    assert!(report["aggregates"][0].get("sd").is_none());
}

#[test]
fn gradcheck_passes_quickly() {
    let start = Instant::now();
    let out = ok(&["gradcheck"]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert!(out.lines().any(|l| l.starts_with("PASS model mfsa_cal")), "{out}");
    assert!(!out.lines().any(|l| l.starts_with("FAIL")), "{out}");
    assert!(out.trim_end().ends_with("0 failed"));
}
