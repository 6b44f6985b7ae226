#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_hte");

pub fn hte(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn hte")
}

/// Runs `hte` and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str]) {
    let out = hte(args);
    assert!(
        out.status.success(),
        "hte {} failed ({:?}):\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas")
}

pub const SCHEMAS: [&str; 9] = [
    "truth",
    "imputations",
    "balance",
    "estimate",
    "forest",
    "rank",
    "blp",
    "calibration",
    "report",
];

/// Errors from validating `instance` against `docs/schemas/<name>.schema.json`.
pub fn schema_errors(name: &str, instance: &Value) -> Vec<String> {
    let mut registry = jsonschema::Registry::new();
    for other in SCHEMAS {
        let doc = read_json(&schema_dir().join(format!("{other}.schema.json")));
        registry = registry.add(format!("urn:hte:schema:{other}"), doc).unwrap();
    }
    let registry = registry.prepare().unwrap();
    let schema = read_json(&schema_dir().join(format!("{name}.schema.json")));
    let validator = jsonschema::options().with_registry(&registry).build(&schema).unwrap();
    validator.iter_errors(instance).map(|e| format!("{e} at {}", e.instance_path())).collect()
}

/// Names and contents of every regular file in `dir`, sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

pub fn estimate_row<'a>(doc: &'a Value, estimand: &str, estimator: &str) -> &'a Value {
    doc["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["estimand"] == estimand && r["estimator"].as_str().unwrap().starts_with(estimator))
        .unwrap_or_else(|| panic!("no {estimand} row for {estimator}"))
}

pub fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}
