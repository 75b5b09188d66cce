use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gwfract(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gwfract"))
        .args(args)
        .env_remove("GWFRACT_THREADS")
        .output()
        .expect("binary runs")
}

fn json(args: &[&str]) -> Value {
    let mut all = vec!["--json"];
    all.extend_from_slice(args);
    let out = gwfract(&all);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn code(args: &[&str]) -> i32 {
    gwfract(args).status.code().expect("exit code")
}

#[test]
fn moran_matches_closed_form() {
    let doc = json(&["moran", "--percolation", "b=3,d=2,p=0.6"]);
    let delta = doc["delta"].as_f64().unwrap();
    assert!((delta - 5.4f64.ln() / 3f64.ln()).abs() <= 1e-9, "{delta}");
}

#[test]
fn moran_of_the_full_gasket() {
    let doc = json(&["moran", "--ifs", "sierpinski"]);
    assert!((doc["delta"].as_f64().unwrap() - 3f64.log2()).abs() <= 1e-9);
}

#[test]
fn fixpoint_reports_trace_and_tau() {
    let doc = json(&["fixpoint", "--offspring", "bin:9:0.6", "--collection", "ary:2"]);
    assert!((doc["s0"].as_f64().unwrap() - 3.973_028_872_473_4e-3).abs() <= 1e-12);
    assert!(doc["tau"].is_number());
    assert!(!doc["trace"].as_array().unwrap().is_empty());
    assert!(doc["method"].is_string());
}

#[test]
fn extinction_with_monte_carlo() {
    let doc = json(&["extinction", "--offspring", "bin:9:0.6", "--mc-trials", "20000", "--seed", "4"]);
    assert!((doc["q"].as_f64().unwrap() - 2.630_764_838_637_112e-4).abs() <= 1e-12);
    assert_eq!(doc["monte_carlo"]["within_3_sigma"], Value::Bool(true));
}

#[test]
fn simulate_writes_a_raster() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("out.pgm");
    let doc = json(&[
        "simulate",
        "--percolation",
        "b=3,d=2,p=0.6",
        "--depth",
        "4",
        "--seed",
        "7",
        "--render",
        pgm.to_str().unwrap(),
    ]);
    let bytes = std::fs::read(&pgm).unwrap();
    let header = b"P5\n729 729\n255\n";
    assert!(bytes.starts_with(header));
    let body = &bytes[header.len()..];
    assert_eq!(body.len(), 729 * 729);
    // Each surviving depth-4 square is a 9 x 9 block of black pixels.
    let black = body.iter().filter(|&&x| x == 0).count();
    let cells = doc["points"].as_u64().unwrap() as usize;
    assert_eq!(black, cells * 81);
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let args = ["--json", "simulate", "--percolation", "b=3,d=2,p=0.7", "--depth", "5", "--seed", "11"];
    let a = gwfract(&args).stdout;
    let b = gwfract(&args).stdout;
    let mut threaded = vec!["--threads", "3"];
    threaded.extend_from_slice(&args);
    let c = gwfract(&threaded).stdout;
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(a, c);
    let exp = ["--json", "experiment", "convergence-g-k", "--trials", "2000", "--seed", "2"];
    assert_eq!(gwfract(&exp).stdout, gwfract(&exp).stdout);
}

#[test]
fn thread_count_from_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_gwfract"))
        .args(["--json", "moran", "--percolation", "b=3,d=2,p=0.6"])
        .env("GWFRACT_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_gwfract"))
        .args(["moran", "--percolation", "b=3,d=2,p=0.6"])
        .env("GWFRACT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_input_exits_2() {
    assert_eq!(code(&["moran", "--percolation", "b=1,p=0.5"]), 2);
    assert_eq!(code(&["moran", "--no-such-flag"]), 2);
    assert_eq!(code(&["fixpoint", "--offspring", "bin:9:1.5", "--collection", "ary:2"]), 2);
    assert_eq!(code(&["extract", "--percolation", "b=3,p=0.6", "--c", "1.5"]), 2);
    assert_eq!(code(&["experiment", "no-such-experiment"]), 2);
}

#[test]
fn not_found_exits_3_with_a_prediction() {
    let out = gwfract(&[
        "extract",
        "--percolation",
        "b=3,p=0.34",
        "--c",
        "3",
        "--levels",
        "2",
        "--max-vertices",
        "1",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("predicted per-vertex success"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn resource_limit_exits_4() {
    assert_eq!(code(&["simulate", "--percolation", "b=3,p=0.9", "--depth", "6", "--budget", "100"]), 4);
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn config_file_is_validated_and_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(
        &cfg,
        r#"{"command": "simulate", "seed": 3, "percolation": {"b": 3, "d": 2, "p": 0.6}, "depth": 3}"#,
    );
    let from_file = json(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(from_file["seed"], 3);
    assert_eq!(from_file["depth"], 3);
    let overridden = json(&["--config", cfg.to_str().unwrap(), "simulate", "--seed", "5", "--depth", "2"]);
    assert_eq!(overridden["seed"], 5);
    assert_eq!(overridden["depth"], 2);
    // The typed command is what the flags of a matching file apply to.
    let direct = json(&["simulate", "--percolation", "b=3,d=2,p=0.6", "--depth", "2", "--seed", "5"]);
    assert_eq!(overridden, direct);

    write(&cfg, r#"{"command": "simulate", "colour": "blue"}"#);
    assert_eq!(code(&["--config", cfg.to_str().unwrap()]), 2);
    write(&cfg, "not json");
    assert_eq!(code(&["--config", cfg.to_str().unwrap()]), 2);
    assert_eq!(code(&["--config", dir.path().join("missing.json").to_str().unwrap()]), 2);
}

#[test]
fn extracted_subset_round_trips_through_the_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("subset");
    let o = out.to_str().unwrap();
    let summary = json(&["extract", "--percolation", "b=3,d=2,p=0.7", "--c", "3", "--levels", "2", "--seed", "4", "--out", o]);
    assert_eq!(summary["levels"], 2);
    for f in ["subset.json", "tree.txt", "measure.csv", "cloud.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let ahl = json(&["check-ahlfors", "--subset", o, "--samples", "300"]);
    assert!(ahl["spread"].as_f64().unwrap() < 1e3);
    let dif = json(&["check-diffuse", "--subset", o]);
    assert_eq!(dif["pass"], Value::Bool(true));
    let grid = json(&["boxdim", "--subset", o, "--grid", "3"]);
    assert!((grid["estimate"].as_f64().unwrap() - 1.0).abs() < 0.15);
    let eps = summary["certificates"]["scale_window"][0].as_f64().unwrap().to_string();
    let cloud = out.join("cloud.csv");
    let bd = json(&["boxdim", "--cloud", cloud.to_str().unwrap(), "--eps", &eps]);
    assert!(bd["estimate"].is_number());
}

#[test]
fn diffuse_certificate_of_the_gasket() {
    let doc = json(&["diffuse-cert", "--ifs", "sierpinski", "--section-depth", "2"]);
    let c = doc["c_low"].as_f64().unwrap();
    assert!(c > 0.2 && c <= doc["c_search"].as_f64().unwrap());
    assert_eq!(doc["pieces"], 9);
}

#[test]
fn experiment_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let doc = json(&[
        "experiment",
        "convergence-g-k",
        "--trials",
        "2000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(doc["verdict"], "pass");
    assert!(doc.get("runtime_secs").is_none());
    assert!(dir.path().join("convergence-g-k.json").is_file());
    assert!(dir.path().join("convergence-g-k.csv").is_file());
    let timed = json(&["--timing", "experiment", "convergence-g-k", "--trials", "2000"]);
    assert!(timed["runtime_secs"].is_number());
}

#[test]
fn render_full_gasket() {
    let dir = tempfile::tempdir().unwrap();
    let doc = json(&["render", "--ifs", "sierpinski", "--depth", "5", "--size", "128", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(doc["points"], 243);
    let bytes = std::fs::read(dir.path().join("render.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n128 "));
}

#[test]
fn help_lists_every_subcommand() {
    let out = gwfract(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for c in [
        "simulate",
        "extinction",
        "moran",
        "fixpoint",
        "gk-curve",
        "extract",
        "diffuse-cert",
        "check-diffuse",
        "check-ahlfors",
        "boxdim",
        "experiment",
        "render",
    ] {
        assert!(text.contains(c), "help misses {c}");
    }
}
