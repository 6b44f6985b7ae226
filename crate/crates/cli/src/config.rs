//! Command-line flags, the flat JSON config file, and their merge.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "hte", version, about = "Treatment effect estimation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with its ground truth.
    Simulate,
    /// Multiply impute missing covariates.
    Impute,
    /// Covariate balance before and after inverse propensity weighting.
    Balance,
    /// Naive, regression, IPW and AIPW effect estimates.
    Estimate,
    /// Causal forest with its full diagnostic suite.
    Forest,
    /// Effects by quantile of the forest's predicted effect.
    Rank,
    /// Best linear projection of the effect on chosen covariates.
    Blp,
    /// Calibration test of the forest predictions.
    Calibrate,
    /// Collect the JSON outputs of a run directory into one report.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Impute => "impute",
            Command::Balance => "balance",
            Command::Estimate => "estimate",
            Command::Forest => "forest",
            Command::Rank => "rank",
            Command::Blp => "blp",
            Command::Calibrate => "calibrate",
            Command::Report => "report",
        }
    }
}

/// Every flag, shared by all subcommands. Unset flags fall back to the config
/// file, then to [`RunConfig`] defaults.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Opts {
    /// Flat JSON file whose keys mirror the long flags (with underscores).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Run seed; required, there is no clock-based default.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,

    /// Synthetic design: a preset name or `ssm-like`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Share of cells blanked at random in `missing_columns`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing_rate: Option<f64>,
    /// Comma-separated covariates to blank.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing_columns: Option<String>,

    /// Data CSV; repeat for imputed copies, or pass an imputation manifest.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub data: Vec<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    /// Truth sidecar written by `simulate`; adds bias columns.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    /// Per-unit forest output (`cate.csv`) reused by rank, blp and calibrate.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
    /// Directory read by `report`; defaults to the output directory.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,

    /// Number of imputations.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_lo: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_hi: Option<f64>,
    /// `arm-linear` or `dummy-linear`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_model: Option<String>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_trees: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_leaf: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_treated: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_control: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsample_fraction: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mtry: Option<usize>,
    /// `none` or `mean`: refit on features with above-mean importance.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_vars: Option<String>,
    /// Covariate defining the subgroups; default is the most important one.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgroup_var: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_rankings: Option<usize>,
    /// Comma-separated covariates for the linear projection.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blp_vars: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hist_bins: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectVars {
    None,
    Mean,
}

/// Resolved settings for one command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub preset: Option<String>,
    pub n: usize,
    pub missing_rate: f64,
    pub missing_columns: Option<String>,
    pub data: Vec<PathBuf>,
    pub schema: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub m: usize,
    pub folds: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub outcome_model: String,
    pub num_trees: usize,
    pub min_leaf: usize,
    pub min_treated: usize,
    pub min_control: usize,
    pub subsample_fraction: f64,
    pub mtry: Option<usize>,
    pub select_vars: SelectVars,
    pub subgroup_var: Option<String>,
    pub num_rankings: usize,
    pub blp_vars: Option<String>,
    pub hist_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let forest = hte_core::causal_forest::CausalForestParams::default();
        let clip = hte_core::estimators::DEFAULT_CLIP;
        Self {
            seed: None,
            out_dir: PathBuf::from("."),
            threads: None,
            preset: None,
            n: 1000,
            missing_rate: 0.0,
            missing_columns: None,
            data: Vec::new(),
            schema: None,
            truth: None,
            scores: None,
            run_dir: None,
            m: 5,
            folds: 5,
            clip_lo: clip.0,
            clip_hi: clip.1,
            outcome_model: "arm-linear".into(),
            num_trees: forest.num_trees,
            min_leaf: forest.min_leaf,
            min_treated: forest.min_treated,
            min_control: forest.min_control,
            subsample_fraction: forest.subsample_fraction,
            mtry: None,
            select_vars: SelectVars::None,
            subgroup_var: None,
            num_rankings: 5,
            blp_vars: None,
            hist_bins: 30,
        }
    }
}

/// Reads a config file into a JSON object; relative paths inside it are
/// resolved against the file's directory.
fn read_config_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(mut map) = value else {
        return Err(CliError::Config(format!("config {} must be a JSON object", path.display())));
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let rebase = |v: &mut Value| {
        if let Value::String(s) = v {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(s.as_str()).to_string_lossy().into_owned();
            }
        }
    };
    for key in ["out_dir", "schema", "truth", "scores", "run_dir"] {
        if let Some(v) = map.get_mut(key) {
            rebase(v);
        }
    }
    if let Some(v) = map.get_mut("data") {
        match v {
            Value::Array(items) => items.iter_mut().for_each(rebase),
            other => {
                rebase(other);
                *other = Value::Array(vec![other.clone()]);
            }
        }
    }
    Ok(map)
}

/// Config file values overridden by explicit flags.
pub fn resolve(opts: &Opts) -> Result<RunConfig, CliError> {
    let mut merged = match &opts.config {
        Some(path) => read_config_file(path)?,
        None => Map::new(),
    };
    let Value::Object(flags) = serde_json::to_value(opts).expect("flags serialize") else {
        unreachable!("flags serialize to an object")
    };
    merged.extend(flags);
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(format!("bad configuration: {e}")))
}

impl RunConfig {
    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or(CliError::MissingSeed)
    }

    pub fn clip(&self) -> Result<(f64, f64), CliError> {
        let (lo, hi) = (self.clip_lo, self.clip_hi);
        if 0.0 < lo && lo < hi && hi < 1.0 {
            Ok((lo, hi))
        } else {
            Err(CliError::Config(format!("clip bounds ({lo}, {hi}) must satisfy 0 < lo < hi < 1")))
        }
    }

    pub fn list(value: &Option<String>) -> Vec<String> {
        value
            .iter()
            .flat_map(|s| s.split(','))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }
}
