use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn pp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pp"))
        .current_dir(dir)
        .env_remove("PP_SEED")
        .args(args)
        .output()
        .expect("spawn pp")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pp(dir, args);
    assert!(
        out.status.success(),
        "pp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    pp(dir, args).status.code().unwrap()
}

const SHAPE: [&str; 10] = ["--layers", "3", "--d-model", "16", "--heads", "2", "--mlp-hidden", "32", "--vocab", "64"];

/// Small model plus an inference corpus and a calibration corpus.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["gen-model", "--out", "m.ppw", "--seed", "3"];
    args.extend(SHAPE);
    ok(d, &args);
    ok(d, &["gen-corpus", "--out", "c.ppt", "--model", "m.ppw", "--sequences", "48", "--seq-len", "16", "--seed", "4"]);
    ok(d, &["gen-corpus", "--out", "cal.ppt", "--model", "m.ppw", "--sequences", "16", "--seq-len", "16", "--segment", "1", "--seed", "5"]);
    dir
}

const RUN: [&str; 8] = ["--batch-size", "4", "--seq-len", "16", "--skip-layers", "1", "--calibration-batch-size", "16"];

fn run(d: &Path, report: &str, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["run", "--model", "m.ppw", "--corpus", "c.ppt", "--report", report];
    args.extend(RUN);
    args.extend(extra);
    serde_json::from_str(&ok(d, &args)).unwrap()
}

fn read(d: &Path, name: &str) -> Vec<u8> {
    std::fs::read(d.join(name)).unwrap()
}

fn masks(d: &Path, report: &str) -> Vec<serde_json::Value> {
    String::from_utf8(read(d, report))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["retained_indices"].clone())
        .collect()
}

#[test]
fn gen_model_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut a = vec!["gen-model", "--out", "a.ppw", "--seed", "9"];
    a.extend(SHAPE);
    let mut b = vec!["gen-model", "--out", "b.ppw", "--seed", "9"];
    b.extend(SHAPE);
    ok(d, &a);
    ok(d, &b);
    assert_eq!(read(d, "a.ppw"), read(d, "b.ppw"));
    assert_eq!(&read(d, "a.ppw")[..4], b"PPW1");
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut flag = vec!["gen-model", "--out", "flag.ppw", "--seed", "7"];
    flag.extend(SHAPE);
    ok(d, &flag);
    let mut env = vec!["gen-model", "--out", "env.ppw"];
    env.extend(SHAPE);
    let out = Command::new(env!("CARGO_BIN_EXE_pp")).current_dir(d).env("PP_SEED", "7").args(&env).output().unwrap();
    assert!(out.status.success());
    assert_eq!(read(d, "flag.ppw"), read(d, "env.ppw"));
    let bad = Command::new(env!("CARGO_BIN_EXE_pp")).current_dir(d).env("PP_SEED", "x").args(&env).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn invalid_model_shape_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["gen-model", "--out", "m.ppw", "--d-model", "10", "--heads", "3"]), 2);
    assert_eq!(code(dir.path(), &["gen-model"]), 2);
}

#[test]
fn config_file_is_strict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"version": 1, "engine": {"ratio": 0.5}}"#).unwrap();
    assert_eq!(code(d, &["gen-model", "--config", "bad.json", "--out", "m.ppw"]), 2);
    std::fs::write(d.join("old.json"), r#"{"version": 0}"#).unwrap();
    assert_eq!(code(d, &["gen-model", "--config", "old.json", "--out", "m.ppw"]), 2);
    std::fs::write(d.join("good.json"), r#"{"version": 1, "seed": 2, "model": {"num_layers": 1, "d_model": 8, "num_heads": 2, "mlp_hidden": 8, "vocab_size": 16}}"#).unwrap();
    let out: serde_json::Value = serde_json::from_str(&ok(d, &["gen-model", "--config", "good.json", "--out", "m.ppw"])).unwrap();
    assert_eq!(out["model"]["seed"], 2);
    assert_eq!(out["model"]["d_model"], 8);
}

#[test]
fn calibrate_round_trip_and_errors() {
    let dir = workspace();
    let d = dir.path();
    let args = ["calibrate", "--model", "m.ppw", "--corpus", "cal.ppt", "--out-history", "h1.pph", "--batch-size", "16", "--seq-len", "16"];
    ok(d, &args);
    let mut again = args;
    again[6] = "h2.pph";
    ok(d, &again);
    assert_eq!(read(d, "h1.pph"), read(d, "h2.pph"));
    assert_eq!(&read(d, "h1.pph")[..4], b"PPH1");

    // too little calibration data
    let mut short = args;
    short[8] = "64";
    assert_eq!(code(d, &short), 2);

    // a snapshot-driven run equals a calibrate-in-process run
    run(d, "snap.jsonl", &["--mode", "pp", "--history", "h1.pph"]);
    run(d, "inline.jsonl", &["--mode", "pp", "--calibration", "cal.ppt"]);
    assert_eq!(read(d, "snap.jsonl"), read(d, "inline.jsonl"));

    let mut bytes = read(d, "h1.pph");
    bytes.truncate(bytes.len() - 3);
    std::fs::write(d.join("broken.pph"), bytes).unwrap();
    let mut a = vec!["run", "--model", "m.ppw", "--corpus", "c.ppt", "--report", "x.jsonl", "--mode", "pp", "--history", "broken.pph"];
    a.extend(RUN);
    assert_eq!(code(d, &a), 3);
}

#[test]
fn ratio_zero_pp_matches_dense_perplexity() {
    let dir = workspace();
    let d = dir.path();
    let dense = run(d, "dense.jsonl", &["--mode", "dense"]);
    let pp = run(d, "pp.jsonl", &["--mode", "pp", "--ratio", "0", "--calibration", "cal.ppt"]);
    assert_eq!(dense["perplexity"], pp["perplexity"]);
}

#[test]
fn full_probe_pp_reproduces_full_batch_masks() {
    let dir = workspace();
    let d = dir.path();
    run(d, "pp.jsonl", &["--mode", "pp", "--probe-batch", "1.0", "--probe-seq", "1.0", "--fusion", "probe_only", "--calibration", "cal.ppt"]);
    run(d, "fb.jsonl", &["--mode", "full-batch"]);
    assert_eq!(masks(d, "pp.jsonl"), masks(d, "fb.jsonl"));
}

#[test]
fn report_lines_follow_schema() {
    let dir = workspace();
    let d = dir.path();
    let agg = run(d, "pp.jsonl", &["--mode", "pp", "--calibration", "cal.ppt", "--aggregate", "agg.json"]);
    for key in ["perplexity", "total_flops", "mode", "config_digest"] {
        assert!(agg.get(key).is_some(), "aggregate lacks {key}");
    }
    let on_disk: serde_json::Value = serde_json::from_slice(&read(d, "agg.json")).unwrap();
    assert_eq!(on_disk, agg);
    let text = String::from_utf8(read(d, "pp.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12 * 6);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["batch", "block", "kind", "retained_indices", "ratio", "probe_flops", "block_flops", "metric"] {
            assert!(v.get(key).is_some(), "line lacks {key}: {line}");
        }
        assert!(matches!(v["kind"].as_str(), Some("attention" | "mlp")));
    }
}

#[test]
fn runs_are_byte_identical() {
    let dir = workspace();
    let d = dir.path();
    let a = run(d, "a.jsonl", &["--mode", "pp", "--calibration", "cal.ppt", "--aggregate", "a.json"]);
    let b = run(d, "b.jsonl", &["--mode", "pp", "--calibration", "cal.ppt", "--aggregate", "b.json"]);
    assert_eq!(a, b);
    assert_eq!(read(d, "a.jsonl"), read(d, "b.jsonl"));
    assert_eq!(read(d, "a.json"), read(d, "b.json"));
}

#[test]
fn mode_errors_exit_2() {
    let dir = workspace();
    let d = dir.path();
    let mut a = vec!["run", "--model", "m.ppw", "--corpus", "c.ppt", "--report", "x.jsonl", "--mode", "pp"];
    a.extend(RUN);
    assert_eq!(code(d, &a), 2, "pp without history");
    let mut b = a.clone();
    b.extend(["--calibration", "cal.ppt", "--metric", "flap"]);
    assert_eq!(code(d, &b), 2, "flap outside fixed mode");
    let mut c = a.clone();
    c.extend(["--calibration", "cal.ppt", "--parallel-offset", "2"]);
    assert_eq!(code(d, &c), 2, "offset in plain pp");
    let mut e = a.clone();
    e[8] = "sideways";
    assert_eq!(code(d, &e), 2, "unknown mode");
}

#[test]
fn fixed_flap_and_parallel_modes_run() {
    let dir = workspace();
    let d = dir.path();
    let flap = run(d, "flap.jsonl", &["--mode", "fixed", "--metric", "flap", "--calibration", "cal.ppt"]);
    assert!(flap["perplexity"].as_f64().unwrap() >= 1.0);
    let par = run(d, "par.jsonl", &["--mode", "pp-parallel", "--parallel-offset", "2", "--calibration", "cal.ppt"]);
    assert!(par["perplexity"].as_f64().unwrap().is_finite());
}

#[test]
fn analyze_outputs() {
    let dir = workspace();
    let d = dir.path();
    run(d, "fb.jsonl", &["--mode", "full-batch"]);
    run(d, "pp.jsonl", &["--mode", "pp", "--calibration", "cal.ppt"]);
    run(d, "fixed.jsonl", &["--mode", "fixed", "--calibration", "cal.ppt"]);

    ok(d, &["analyze", "--kind", "jaccard", "--reports", "pp.jsonl", "pp.jsonl", "--out", "self.csv"]);
    let csv = String::from_utf8(read(d, "self.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "block,kind,j_pp_oracle,j_fixed_oracle,jr_pp_oracle,jr_fixed_oracle");
    for l in lines {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[2], "1.0");
    }
    let three = ok(d, &["analyze", "--kind", "jaccard", "--reports", "fb.jsonl", "pp.jsonl", "fixed.jsonl"]);
    assert_eq!(three.lines().count(), 7);

    let prr = ok(d, &["analyze", "--kind", "prr", "--perf-dense", "6.0", "--perf-pruned", "16.8", "--runtime-dense", "1.028", "--runtime-pruned", "0.739"]);
    let value: f64 = prr.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((value - 37.37).abs() < 0.01);
    std::fs::write(d.join("rows.json"), r#"[{"label": "flap", "perf_dense": 6.0, "perf_pruned": 38.9, "runtime_dense": 1.028, "runtime_pruned": 0.684}]"#).unwrap();
    let prr = ok(d, &["analyze", "--kind", "prr", "--reports", "rows.json"]);
    assert!(prr.contains("flap,6.0,38.9"));
    assert_eq!(code(d, &["analyze", "--kind", "prr", "--perf-dense", "1", "--perf-pruned", "2", "--runtime-dense", "1", "--runtime-pruned", "2"]), 2);

    let flops = ok(d, &["analyze", "--kind", "flops", "--reports", "pp.jsonl", "fixed.jsonl", "fb.jsonl"]);
    for row in flops.lines().skip(1) {
        let share: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&share));
    }

    // grids differ in batch count
    let mut short = vec!["run", "--model", "m.ppw", "--corpus", "c.ppt", "--report", "short.jsonl", "--mode", "dense", "--max-batches", "1"];
    short.extend(RUN);
    ok(d, &short);
    assert_eq!(code(d, &["analyze", "--kind", "jaccard", "--reports", "short.jsonl", "pp.jsonl"]), 2);
    std::fs::write(d.join("junk.jsonl"), "{not json}\n").unwrap();
    assert_eq!(code(d, &["analyze", "--kind", "flops", "--reports", "junk.jsonl"]), 3);
}

#[test]
fn run_with_reference_reports_jaccard() {
    let dir = workspace();
    let d = dir.path();
    run(d, "fb.jsonl", &["--mode", "full-batch"]);
    let agg = run(d, "pp.jsonl", &["--mode", "pp", "--calibration", "cal.ppt", "--reference", "fb.jsonl"]);
    let j = agg["jaccard"].as_array().unwrap();
    assert_eq!(j.len(), 6);
    assert_eq!(j[0]["pruned"], 1.0);
}

#[test]
fn flops_command_llama_scale() {
    let dir = tempfile::tempdir().unwrap();
    let out: serde_json::Value = serde_json::from_str(&ok(dir.path(), &["flops", "--llama2-7b", "--out", "f.csv"])).unwrap();
    let share = out["probe_share"].as_f64().unwrap();
    assert!((0.01..=0.02).contains(&share), "{share}");
    let csv = std::fs::read_to_string(PathBuf::from(dir.path()).join("f.csv")).unwrap();
    assert!(csv.starts_with("label,dense_flops"));
}

#[test]
fn corrupt_inputs_exit_3() {
    let dir = workspace();
    let d = dir.path();
    std::fs::write(d.join("bad.ppt"), b"PPT1\x01").unwrap();
    let mut a = vec!["run", "--model", "m.ppw", "--corpus", "bad.ppt", "--report", "x.jsonl", "--mode", "dense"];
    a.extend(RUN);
    assert_eq!(code(d, &a), 3);
    let mut b = vec!["run", "--model", "missing.ppw", "--corpus", "c.ppt", "--report", "x.jsonl", "--mode", "dense"];
    b.extend(RUN);
    assert_eq!(code(d, &b), 3);
}
