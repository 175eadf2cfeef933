use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphmatch"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn version_carries_schema_hash() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--version"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("config schema"), "{text}");
}

#[test]
fn bad_configs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("alpha.json"), r#"{"alpha": 1.5}"#).unwrap();
    std::fs::write(d.join("unknown.json"), r#"{"solver": {"restart": 3}}"#).unwrap();
    std::fs::write(d.join("broken.json"), "{").unwrap();
    for file in ["alpha.json", "unknown.json", "broken.json"] {
        let o = run(d, &["train-ssl", "--config", file, "--out", "run"]);
        assert_eq!(code(&o), 2, "{file}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
    assert!(!d.join("run").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["solver-bench", "--frobnicate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_inputs_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["eval-match", "--batch", "nowhere"]);
    assert_eq!(code(&o), 4);
    let o = run(dir.path(), &["eval-ood", "--head", "nowhere"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn print_config_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train-ssl", "--print-config", "--seed", "9"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["N"], 16);
}

#[test]
fn solver_bench_stdout_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["solver-bench", "--max-n", "7", "--instances", "2", "--seed", "3"];
    let a = run(dir.path(), &args);
    let b = run(dir.path(), &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("N,method,score,optimal_ratio,millis"));
    assert_eq!(text.lines().count(), 1 + 4 * 3);
}

#[test]
fn gen_data_then_eval_match_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"N": 5, "k": 2, "F": 4, "data": {"D": 3, "G": 8, "R": 3, "S": 3}}"#).unwrap();
    assert!(run(d, &["gen-data", "--config", "c.json", "--seed", "1", "--out", "b"]).status.success());
    for f in ["ys.gmt", "pos_s.gmt", "yt.gmt", "pos_t.gmt"] {
        assert!(d.join("b").join(f).is_file(), "{f}");
    }
    let o = run(d, &["eval-match", "--config", "c.json", "--batch", "b", "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["perm"].as_array().unwrap().len(), 5);
    let acc = v["matching_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
