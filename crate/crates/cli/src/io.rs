//! Reading inputs and writing artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use hte_core::dataset::{load_csv, Schema};
use hte_core::Dataset;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, RunConfig};

/// Written by `impute`; lists the completed datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub schema: PathBuf,
    pub imputations: Vec<PathBuf>,
}

/// Written by `simulate` next to the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema_version: String,
    pub preset: String,
    pub n: usize,
    pub seed: u64,
    pub ate_true: f64,
    pub att_true: f64,
    pub tau_true_path: PathBuf,
}

/// Truth sidecar with the per-unit effects loaded.
#[derive(Debug, Clone)]
pub struct Truth {
    pub file: TruthFile,
    pub tau: Vec<f64>,
}

/// One or more completed datasets sharing a schema.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub paths: Vec<PathBuf>,
    pub schema: Schema,
    pub datasets: Vec<Dataset<f64>>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn beside(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.parent().unwrap_or(Path::new("")).join(p)
    } else {
        p.to_path_buf()
    }
}

fn is_json(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "json")
}

/// Data paths with manifests expanded, and the schema to read them with:
/// `--schema`, else the manifest's, else `schema.json` beside the data.
pub fn resolve_data(cfg: &RunConfig) -> CliResult<(Vec<PathBuf>, PathBuf)> {
    if cfg.data.is_empty() {
        return Err(config_err("--data is required"));
    }
    let mut paths = Vec::new();
    let mut manifest_schema = None;
    for p in &cfg.data {
        if is_json(p) {
            let m: Manifest = read_json(p)?;
            manifest_schema.get_or_insert_with(|| beside(p, &m.schema));
            paths.extend(m.imputations.iter().map(|q| beside(p, q)));
        } else {
            paths.push(p.clone());
        }
    }
    if paths.is_empty() {
        return Err(config_err("the manifest lists no datasets"));
    }
    let schema = cfg
        .schema
        .clone()
        .or(manifest_schema)
        .unwrap_or_else(|| beside(&paths[0], Path::new("schema.json")));
    if !schema.exists() {
        return Err(config_err(format!("schema file {} not found; pass --schema", schema.display())));
    }
    Ok((paths, schema))
}

pub fn load_inputs(cfg: &RunConfig) -> CliResult<Inputs> {
    let (paths, schema_path) = resolve_data(cfg)?;
    let schema: Schema = read_json(&schema_path)?;
    let datasets = paths
        .iter()
        .map(|p| load_csv::<f64>(p, &schema).map_err(|e| config_err(format!("{}: {e}", p.display()))))
        .collect::<CliResult<Vec<_>>>()?;
    let n = datasets[0].n();
    if datasets.iter().any(|d| d.n() != n || d.column_names() != datasets[0].column_names()) {
        return Err(config_err("imputed datasets differ in rows or columns"));
    }
    Ok(Inputs {
        paths,
        schema,
        datasets,
    })
}

/// Loads `--truth` if given, checking it matches `n` units.
pub fn load_truth(cfg: &RunConfig, n: usize) -> CliResult<Option<Truth>> {
    let Some(path) = &cfg.truth else {
        return Ok(None);
    };
    let file: TruthFile = read_json(path)?;
    let tau_path = beside(path, &file.tau_true_path);
    let mut rdr = csv::Reader::from_path(&tau_path).map_err(|e| config_err(format!("{}: {e}", tau_path.display())))?;
    let mut tau = Vec::new();
    for rec in rdr.deserialize::<(usize, f64)>() {
        let (_, t) = rec.map_err(|e| config_err(format!("{}: {e}", tau_path.display())))?;
        tau.push(t);
    }
    if tau.len() != n {
        return Err(config_err(format!("truth has {} units, data has {n}", tau.len())));
    }
    Ok(Some(Truth { file, tau }))
}

/// Per-unit forest output of one imputation.
#[derive(Debug, Clone, Default)]
pub struct UnitScores {
    pub tau_hat: Vec<f64>,
    pub score: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRecord {
    imputation: usize,
    unit: usize,
    tau_hat: f64,
    aipw_score: f64,
}

pub fn write_scores(path: &Path, per_imputation: &[UnitScores]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    for (k, s) in per_imputation.iter().enumerate() {
        for (i, (&t, &g)) in s.tau_hat.iter().zip(&s.score).enumerate() {
            w.serialize(ScoreRecord {
                imputation: k + 1,
                unit: i + 1,
                tau_hat: t,
                aipw_score: g,
            })
            .context("writing scores")?;
        }
    }
    w.flush().context("writing scores")?;
    Ok(())
}

/// Reads `cate.csv`, checking it has `m` imputations of `n` units.
pub fn read_scores(path: &Path, m: usize, n: usize) -> CliResult<Vec<UnitScores>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut out = vec![UnitScores::default(); m];
    for rec in rdr.deserialize::<ScoreRecord>() {
        let r = rec.map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let slot = r
            .imputation
            .checked_sub(1)
            .and_then(|k| out.get_mut(k))
            .ok_or_else(|| config_err(format!("{}: imputation {} out of range", path.display(), r.imputation)))?;
        slot.tau_hat.push(r.tau_hat);
        slot.score.push(r.aipw_score);
    }
    if out.iter().any(|s| s.tau_hat.len() != n) {
        return Err(config_err(format!(
            "{} does not hold {m} imputation(s) of {n} units",
            path.display()
        )));
    }
    Ok(out)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value).with_context(|| format!("writing {}", path.display()))?;
    writeln!(w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn csv_writer(path: &Path) -> CliResult<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?)
}

/// Writes a header and rows of already formatted cells.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).context("writing table")?;
    for r in rows {
        w.write_record(r).context("writing table")?;
    }
    w.flush().context("writing table")?;
    Ok(())
}

/// Shortest round-trip decimal; `NA` for non-finite values.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        "NA".into()
    }
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), num)
}
