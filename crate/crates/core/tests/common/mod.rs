#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smcinfer"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn smcinfer")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

pub fn schema_errors(schema: &str, instance: &serde_json::Value) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(schema);
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).expect("schema compiles");
    v.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect()
}

pub fn assert_schema(schema: &str, instance: &serde_json::Value) {
    let errs = schema_errors(schema, instance);
    assert!(errs.is_empty(), "{schema}: {errs:#?}");
}

pub const PRECESSION: &str = r#"
seed = 11
n_particles = 2000
n_experiments = 20
model = ["binomial", { n_meas = 25 }, "precession"]
true_params = [0.5]

[prior]
kind = "uniform"
bounds = [[0.0, 1.0]]

[heuristic]
kind = "linear-grid"
start = 0.1
stop = 20.0
count = 20
"#;

pub const RB: &str = r#"
seed = 5
n_particles = 12000
n_experiments = 201
model = ["binomial", { n_meas = 25 }, "rb"]
true_params = [0.95, 0.5, 0.5]

[prior]
kind = "uniform"
bounds = [[0.8, 1.0], [0.0, 1.0], [0.0, 1.0]]

[heuristic]
kind = "linear-grid"
start = 1
stop = 800
count = 201
"#;

/// Simulates and estimates `config`, returning `(truth, mean, std)`.
pub fn round_trip(dir: &Path, name: &str, config: &str, extra: &[&str]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = write(dir, &format!("{name}.toml"), config);
    let data = dir.join(format!("{name}.csv"));
    let out = dir.join(format!("{name}.json"));
    let s = run(&["simulate", "-c", cfg.to_str().unwrap(), "-o", data.to_str().unwrap()]);
    assert_eq!(code(&s), 0, "{}", stderr(&s));
    let mut args = vec!["estimate", "-c", cfg.to_str().unwrap(), "-d", data.to_str().unwrap(), "-o", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let e = run(&args);
    assert_eq!(code(&e), 0, "{}", stderr(&e));
    let manifest = read_json(&dir.join(format!("{name}.csv.manifest.json")));
    let summary = read_json(&out);
    let nums = |v: &serde_json::Value| v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>();
    let truth = nums(&manifest["true_params"]);
    let mean = nums(&summary["mean"]);
    let cov = summary["covariance"].as_array().unwrap();
    let std = (0..mean.len()).map(|i| cov[i][i].as_f64().unwrap().sqrt()).collect();
    (truth, mean, std)
}
