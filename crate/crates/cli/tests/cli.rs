use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dips::data::save_csv;
use dips::sim::gen_scenario;
use dips::{Scenario, ScenarioConfig};
use serde_json::Value;
use tempfile::TempDir;

fn dips_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dips"))
}

fn run(args: &[&str]) -> Output {
    dips_bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_csv(dir: &Path, binary: bool) -> PathBuf {
    let mut cfg = ScenarioConfig::new(Scenario::BothCorrect, 300, 12, 1, 21);
    cfg.noise_sd = 2.0;
    let (mut d, _) = gen_scenario(&cfg, 0).unwrap();
    if binary {
        let y = d.y().iter().map(|&v| f64::from(u8::from(v > 0.5))).collect();
        d = d.with_outcome(y).unwrap();
    }
    let path = dir.join(if binary { "binary.csv" } else { "toy.csv" });
    save_csv(&d, &path, "Y", "T").unwrap();
    path
}

fn parse(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", stderr(o));
    serde_json::from_slice(&o.stdout).expect("valid JSON")
}

#[test]
fn estimate_happy_path() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), false);
    let o = run(&[
        "estimate", "--input", csv.to_str().unwrap(), "--outcome", "Y", "--treatment", "T",
        "--family", "gaussian", "--method", "dips", "--resamples", "200", "--seed", "7",
    ]);
    let v = parse(&o);
    assert_eq!(v["method"], "dips");
    assert_eq!(v["n"], 300);
    assert_eq!(v["p"], 12);
    assert!(v["estimate"].is_f64());
    assert!(v["se"].as_f64().unwrap() > 0.0);
    let ci = v["ci"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= ci[1].as_f64().unwrap());
    assert!(v["p_value"].as_f64().is_some());
    assert_eq!(v["seed"], 7);
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    let diag = &v["diagnostics"];
    for key in ["negative_ps_count", "bandwidth", "ps_support", "om_support", "resample_failures"] {
        assert!(!diag[key].is_null(), "missing {key}");
    }
}

#[test]
fn key_order_is_stable() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), false);
    let o = run(&["estimate", "--input", csv.to_str().unwrap(), "--outcome", "Y", "--treatment", "T", "--resamples", "0"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let keys = ["\"method\"", "\"n\"", "\"p\"", "\"estimate\"", "\"se\"", "\"ci\"", "\"p_value\"", "\"diagnostics\"", "\"seed\"", "\"version\""];
    let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap_or_else(|| panic!("{k} absent"))).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "{pos:?}");
}

#[test]
fn no_resamples_gives_null_inference() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), false);
    let v = parse(&run(&[
        "estimate", "--input", csv.to_str().unwrap(), "--outcome", "Y", "--treatment", "T", "--resamples", "0",
    ]));
    assert!(v["se"].is_null());
    assert!(v["ci"].is_null());
    assert!(v["p_value"].is_null());
}

#[test]
fn several_methods_give_an_array() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), false);
    let v = parse(&run(&[
        "estimate", "--input", csv.to_str().unwrap(), "--outcome", "Y", "--treatment", "T",
        "--method", "dips,ipw-alas,dr-alas", "--resamples", "0",
    ]));
    let arr = v.as_array().unwrap();
    let names: Vec<&str> = arr.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(names, ["dips", "ipw-alas", "dr-alas"]);
    assert!(arr[0]["diagnostics"]["bandwidth"].as_f64().is_some());
    assert!(arr[2]["diagnostics"]["bandwidth"].is_null());
}

#[test]
fn binary_outcome_with_logistic_model() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), true);
    let v = parse(&run(&[
        "estimate", "--input", csv.to_str().unwrap(), "--outcome", "Y", "--treatment", "T",
        "--family", "binomial", "--method", "dips", "--resamples", "50", "--seed", "3",
    ]));
    let est = v["estimate"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&est), "risk difference {est}");
}

#[test]
fn output_file_and_resample_dump() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), false);
    let out = dir.path().join("res.json");
    let draws = dir.path().join("draws.csv");
    let o = run(&[
        "estimate", "--input", csv.to_str().unwrap(), "--outcome", "Y", "--treatment", "T",
        "--resamples", "20", "--output", out.to_str().unwrap(), "--resamples-out", draws.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let failures = v["diagnostics"]["resample_failures"].as_u64().unwrap() as usize;
    let text = std::fs::read_to_string(&draws).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,resample,estimate"));
    assert_eq!(lines.count(), 20 - failures);
}

#[test]
fn identical_runs_are_byte_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), false);
    let args = |threads: &'static str| {
        vec![
            "--threads".to_string(), threads.to_string(), "estimate".into(), "--input".into(),
            csv.to_str().unwrap().to_string(), "--outcome".into(), "Y".into(), "--treatment".into(), "T".into(),
            "--method".into(), "dips,dr-alas".into(), "--resamples".into(), "40".into(), "--seed".into(), "11".into(),
        ]
    };
    let a = dips_bin().args(args("1")).output().unwrap();
    let b = dips_bin().args(args("3")).output().unwrap();
    let c = dips_bin().env("DIPS_THREADS", "2").args(&args("1")[2..]).output().unwrap();
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
}

#[test]
fn missing_treatment_is_config_error() {
    let o = run(&["estimate", "--input", "x.csv", "--outcome", "Y"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("CONFIG:"), "{}", stderr(&o));
}

#[test]
fn unknown_method_is_config_error() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), false);
    let o = run(&["estimate", "--input", csv.to_str().unwrap(), "--outcome", "Y", "--treatment", "T", "--method", "oal"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("CONFIG:"));
}

#[test]
fn bad_trim_is_config_error() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), false);
    let o = run(&["estimate", "--input", csv.to_str().unwrap(), "--outcome", "Y", "--treatment", "T", "--trim-ps", "0.7"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("CONFIG:"));
}

#[test]
fn bad_thread_env_is_config_error() {
    let o = dips_bin()
        .env("DIPS_THREADS", "many")
        .args(["simulate", "--scenario", "both-correct", "--n", "50", "--p", "10", "--reps", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("CONFIG:"));
}

#[test]
fn missing_cells_are_data_errors() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("holes.csv");
    std::fs::write(&path, "Y,T,A\n1,1,0.5\n2,0,\n3,1,0.1\n").unwrap();
    let o = run(&["estimate", "--input", path.to_str().unwrap(), "--outcome", "Y", "--treatment", "T"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("DATA:"), "{err}");
    assert!(err.contains('A'));
}

#[test]
fn missing_input_file_is_data_error() {
    let o = run(&["estimate", "--input", "/definitely/not/here.csv", "--outcome", "Y", "--treatment", "T"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("DATA:"));
    assert!(stderr(&o).contains("here.csv"));
}

#[test]
fn single_arm_is_estimation_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("one_arm.csv");
    std::fs::write(&path, "Y,T,A,B\n1,1,0.5,1\n2,1,0.3,0\n3,1,0.1,2\n4,1,0.9,1\n").unwrap();
    let o = run(&["estimate", "--input", path.to_str().unwrap(), "--outcome", "Y", "--treatment", "T"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ESTIMATION:"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_exits_one() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path(), false);
    let o = run(&[
        "estimate", "--input", csv.to_str().unwrap(), "--outcome", "Y", "--treatment", "T", "--resamples", "0",
        "--output", "/no/such/dir/out.json",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_happy_path_and_csv() {
    let dir = TempDir::new().unwrap();
    let table = dir.path().join("table.csv");
    let v = parse(&run(&[
        "simulate", "--scenario", "misspec-ps", "--n", "200", "--p", "10", "--reps", "4", "--seed", "1",
        "--csv", table.to_str().unwrap(),
    ]));
    assert_eq!(v["scenario"], "misspec-ps");
    assert_eq!(v["reps"], 4);
    assert_eq!(v["estimators"].as_array().unwrap().len(), 3);
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("scenario,n,p,reps,method,bias,rmse"));
}

#[test]
fn simulate_is_deterministic_apart_from_wall_clock() {
    let go = |threads: &str| {
        let mut v = parse(&run(&[
            "--threads", threads, "simulate", "--scenario", "both-misspec", "--n", "150", "--p", "10",
            "--reps", "6", "--seed", "9", "--coverage", "--resamples", "10", "--noise-sd", "3",
        ]));
        v.as_object_mut().unwrap().remove("wall_clock_secs");
        serde_json::to_string(&v).unwrap()
    };
    assert_eq!(go("1"), go("4"));
}

#[test]
fn simulate_rejects_small_p() {
    let o = run(&["simulate", "--scenario", "both-correct", "--n", "100", "--p", "5", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("CONFIG:"));
}

#[test]
fn simulate_rejects_unknown_scenario() {
    let o = run(&["simulate", "--scenario", "nope", "--n", "100", "--p", "10", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(2));
}
