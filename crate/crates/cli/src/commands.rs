//! The nine subcommands. Each reads its inputs, computes, and writes its
//! artifacts into the output directory.

use std::path::{Path, PathBuf};

use hte_core::dataset::{balance as balance_table, impute as impute_datasets, write_csv, BalanceRow, BalanceTable, SMD_THRESHOLD};
use hte_core::estimators::{
    aipw_ate, fit_linear_nuisances, ipw_ate, naive_diff, reg_ate, EstimateReport, Estimand, IpwNormalization,
    NuisanceConfig, OutcomeModel, Target,
};
use hte_core::rng::derive_seed;
use hte_core::stats::pearson;
use hte_core::synth::{gen, gen_ssm_like, mask_mcar, Preset, SsmEffect};
use hte_core::Dataset;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::analysis::{
    fit_forest, histogram, importance_table, mean_importance, mean_tau, most_important, pool_reports, pooled_blp,
    pooled_calibration, pooled_rank, pooled_subgroups, subgroup_labels, CalibrationSummary, ForestFit,
    ImportanceRow, RankSummary, Row, Term,
};
use crate::io::{
    load_inputs, load_truth, num, opt_num, read_scores, write_json, write_scores, write_table, write_text, Inputs,
    Manifest, Truth, TruthFile, UnitScores,
};
use crate::{CliError, CliResult, RunConfig, SCHEMA_VERSION};

/// Preset name accepted by `simulate` besides the registry.
pub const SSM_LIKE: &str = "ssm-like";

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed()?;
    let preset = cfg
        .preset
        .as_deref()
        .ok_or_else(|| config_err("--preset is required"))?;
    if cfg.n < 2 {
        return Err(config_err("--n must be at least 2"));
    }
    let (ds, truth) = if preset == SSM_LIKE {
        gen_ssm_like::<f64>(cfg.n, seed, SsmEffect::default())?
    } else {
        let p: Preset = preset.parse().map_err(|e| config_err(format!("{e}")))?;
        gen::<f64>(&p.dgp(cfg.n, seed))?
    };
    let ds = if cfg.missing_rate > 0.0 {
        if !(cfg.missing_rate < 1.0) {
            return Err(config_err("--missing-rate must lie in [0, 1)"));
        }
        let cols = RunConfig::list(&cfg.missing_columns);
        if cols.is_empty() {
            return Err(config_err("--missing-rate needs --missing-columns"));
        }
        let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        mask_mcar(&ds, &refs, cfg.missing_rate, derive_seed(seed, "mask", 0))
            .map_err(|e| config_err(e.to_string()))?
    } else {
        ds
    };

    write_csv(&ds, out(cfg, "data.csv"))?;
    write_json(&out(cfg, "schema.json"), &ds.schema())?;
    let rows: Vec<Vec<String>> = truth
        .tau
        .iter()
        .enumerate()
        .map(|(i, &t)| vec![(i + 1).to_string(), num(t)])
        .collect();
    write_table(&out(cfg, "tau_true.csv"), &["unit", "tau_true"], &rows)?;
    write_json(
        &out(cfg, "truth.json"),
        &TruthFile {
            schema_version: SCHEMA_VERSION.into(),
            preset: preset.to_string(),
            n: cfg.n,
            seed,
            ate_true: truth.ate_true,
            att_true: truth.att_true,
            tau_true_path: PathBuf::from("tau_true.csv"),
        },
    )?;
    log::info!("wrote {} units of {preset} to {}", cfg.n, cfg.out_dir.display());
    Ok(())
}

pub fn impute(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed()?;
    let Inputs { schema, datasets, .. } = load_inputs(cfg)?;
    let [ds] = datasets.as_slice() else {
        return Err(config_err("impute takes a single --data file"));
    };
    if cfg.m == 0 {
        return Err(config_err("--m must be positive"));
    }
    let completed = impute_datasets(ds, cfg.m, derive_seed(seed, "impute", 0))?;
    let mut names = Vec::new();
    for (k, d) in completed.iter().enumerate() {
        let name = PathBuf::from(format!("imputed_{}.csv", k + 1));
        write_csv(d, out(cfg, &name.to_string_lossy()))?;
        names.push(name);
    }
    write_json(&out(cfg, "schema.json"), &schema)?;
    write_json(
        &out(cfg, "imputations.json"),
        &Manifest {
            schema_version: SCHEMA_VERSION.into(),
            schema: PathBuf::from("schema.json"),
            imputations: names,
        },
    )?;
    log::info!("imputed {} missing cells {} times", ds.missing_count(), cfg.m);
    Ok(())
}

fn nuisance_config(cfg: &RunConfig) -> CliResult<NuisanceConfig> {
    let outcome_model = match cfg.outcome_model.as_str() {
        "arm-linear" => OutcomeModel::ArmLinear,
        "dummy-linear" => OutcomeModel::DummyLinear,
        other => return Err(config_err(format!("unknown outcome model `{other}`"))),
    };
    if cfg.folds == 0 {
        return Err(config_err("--folds must be positive"));
    }
    Ok(NuisanceConfig {
        folds: cfg.folds,
        outcome_model,
        clip: cfg.clip()?,
    })
}

fn complete(inputs: &Inputs) -> CliResult<()> {
    for (d, p) in inputs.datasets.iter().zip(&inputs.paths) {
        if d.missing_count() > 0 {
            return Err(config_err(format!(
                "{} has {} missing covariate cells; run `impute` first",
                p.display(),
                d.missing_count()
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BalanceJson {
    schema_version: &'static str,
    command: &'static str,
    seed: u64,
    imputations: usize,
    threshold: f64,
    max_smd_unweighted: f64,
    max_smd_weighted: f64,
    flagged: Vec<String>,
    rows: Vec<BalanceRow<f64>>,
}

fn average_rows(tables: &[BalanceTable<f64>]) -> BalanceTable<f64> {
    let m = tables.len() as f64;
    let avg = |f: fn(&BalanceRow<f64>) -> f64, j: usize| tables.iter().map(|t| f(&t.rows[j])).sum::<f64>() / m;
    let rows = (0..tables[0].rows.len())
        .map(|j| BalanceRow {
            covariate: tables[0].rows[j].covariate.clone(),
            mean_treated: avg(|r| r.mean_treated, j),
            mean_control: avg(|r| r.mean_control, j),
            var_treated: avg(|r| r.var_treated, j),
            var_control: avg(|r| r.var_control, j),
            smd_unweighted: avg(|r| r.smd_unweighted, j),
            smd_weighted: avg(|r| r.smd_weighted, j),
        })
        .collect();
    BalanceTable { rows }
}

pub fn balance(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed()?;
    let inputs = load_inputs(cfg)?;
    complete(&inputs)?;
    let ncfg = nuisance_config(cfg)?;
    let mut tables = Vec::new();
    for (k, ds) in inputs.datasets.iter().enumerate() {
        let nuis = fit_linear_nuisances(ds, &ncfg, derive_seed(seed, "nuisance", k as u64))?;
        let e = nuis.e_hat.as_deref().expect("propensity fitted");
        let weights: Vec<f64> = (0..ds.n())
            .map(|i| {
                let ipw = if ds.treatment()[i] { 1.0 / e[i] } else { 1.0 / (1.0 - e[i]) };
                ds.weights()[i] * ipw
            })
            .collect();
        tables.push(balance_table(ds, &weights)?);
    }
    let table = average_rows(&tables);
    table.write_csv(out(cfg, "balance.csv"))?;
    write_json(
        &out(cfg, "balance.json"),
        &BalanceJson {
            schema_version: SCHEMA_VERSION,
            command: "balance",
            seed,
            imputations: tables.len(),
            threshold: SMD_THRESHOLD,
            max_smd_unweighted: table.max_smd_unweighted(),
            max_smd_weighted: table.max_smd_weighted(),
            flagged: table.rows.iter().filter(|r| r.flagged()).map(|r| r.covariate.clone()).collect(),
            rows: table.rows,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct EstimateRow {
    #[serde(flatten)]
    report: EstimateReport<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    covers: Option<bool>,
}

#[derive(Serialize)]
struct NuisanceJson {
    folds: usize,
    outcome_model: String,
    clip: (f64, f64),
}

#[derive(Serialize)]
struct EstimateJson {
    schema_version: &'static str,
    command: &'static str,
    seed: u64,
    n: usize,
    imputations: usize,
    nuisance: NuisanceJson,
    estimates: Vec<EstimateRow>,
}

fn with_truth(report: EstimateReport<f64>, truth: Option<&Truth>) -> EstimateRow {
    let value = truth.and_then(|t| match report.estimand {
        Estimand::Ate => Some(t.file.ate_true),
        Estimand::Att => Some(t.file.att_true),
        Estimand::Cate(_) => None,
    });
    EstimateRow {
        truth: value,
        bias: value.map(|v| report.estimate - v),
        covers: value.map(|v| report.covers(v)),
        report,
    }
}

fn estimate_rows(rows: &[EstimateRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.report.estimand.to_string(),
                r.report.estimator.clone(),
                num(r.report.estimate),
                num(r.report.se),
                num(r.report.ci_lo),
                num(r.report.ci_hi),
                r.report.n.to_string(),
                opt_num(r.truth),
                opt_num(r.bias),
                r.covers.map_or_else(|| "NA".into(), |c| u8::from(c).to_string()),
            ]
        })
        .collect()
}

const ESTIMATE_HEADER: [&str; 10] =
    ["estimand", "estimator", "estimate", "se", "ci_lo", "ci_hi", "n", "truth", "bias", "covers"];

pub fn estimate(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed()?;
    let inputs = load_inputs(cfg)?;
    complete(&inputs)?;
    let n = inputs.datasets[0].n();
    let truth = load_truth(cfg, n)?;
    let ncfg = nuisance_config(cfg)?;
    let mut per: Vec<Vec<EstimateReport<f64>>> = Vec::new();
    for (k, ds) in inputs.datasets.iter().enumerate() {
        let nuis = fit_linear_nuisances(ds, &ncfg, derive_seed(seed, "nuisance", k as u64))?;
        per.push(vec![
            naive_diff(ds)?,
            reg_ate(ds, &nuis)?,
            ipw_ate(ds, &nuis, IpwNormalization::Hajek)?,
            aipw_ate(ds, &nuis, Target::All)?,
            aipw_ate(ds, &nuis, Target::Treated)?,
        ]);
    }
    let rows = (0..per[0].len())
        .map(|j| {
            let reports: Vec<_> = per.iter().map(|r| r[j].clone()).collect();
            Ok(with_truth(pool_reports(&reports)?, truth.as_ref()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_table(&out(cfg, "estimates.csv"), &ESTIMATE_HEADER, &estimate_rows(&rows))?;
    write_json(
        &out(cfg, "estimate.json"),
        &EstimateJson {
            schema_version: SCHEMA_VERSION,
            command: "estimate",
            seed,
            n,
            imputations: per.len(),
            nuisance: NuisanceJson {
                folds: ncfg.folds,
                outcome_model: cfg.outcome_model.clone(),
                clip: ncfg.clip,
            },
            estimates: rows,
        },
    )?;
    Ok(())
}

fn fit_all(inputs: &Inputs, cfg: &RunConfig, seed: u64) -> CliResult<Vec<ForestFit>> {
    inputs
        .datasets
        .iter()
        .enumerate()
        .map(|(k, ds)| {
            log::info!("fitting forest {} of {}", k + 1, inputs.datasets.len());
            fit_forest(ds, cfg, seed, k)
        })
        .collect()
}

/// Scores from `--scores`, or from fresh forests seeded as `forest` seeds them.
fn unit_scores(inputs: &Inputs, cfg: &RunConfig, seed: u64) -> CliResult<Vec<UnitScores>> {
    match &cfg.scores {
        Some(path) => read_scores(path, inputs.datasets.len(), inputs.datasets[0].n()),
        None => Ok(fit_all(inputs, cfg, seed)?.into_iter().map(|f| f.scores).collect()),
    }
}

fn row_cells(r: &Row) -> Vec<String> {
    vec![
        r.name.clone(),
        r.n.to_string(),
        opt_num(r.estimate),
        opt_num(r.se),
        opt_num(r.ci_lo),
        opt_num(r.ci_hi),
        r.reason.clone().unwrap_or_default(),
    ]
}

const ROW_HEADER: [&str; 7] = ["group", "n", "estimate", "se", "ci_lo", "ci_hi", "reason"];

fn term_cells(t: &Term) -> Vec<String> {
    vec![
        t.term.clone(),
        num(t.estimate),
        num(t.se),
        num(t.t),
        num(t.p_value),
        num(t.ci_lo),
        num(t.ci_hi),
    ]
}

const TERM_HEADER: [&str; 7] = ["term", "estimate", "se", "t", "p_value", "ci_lo", "ci_hi"];

fn write_rank(cfg: &RunConfig, rank: &RankSummary) -> CliResult<()> {
    let rows: Vec<_> = rank.bins.iter().map(row_cells).collect();
    write_table(&out(cfg, "rank.csv"), &ROW_HEADER, &rows)
}

fn calibration_terms(c: &CalibrationSummary) -> Vec<&Term> {
    std::iter::once(&c.mean_forest_prediction)
        .chain(c.differential_forest_prediction.as_ref())
        .collect()
}

fn write_calibration(cfg: &RunConfig, c: &CalibrationSummary) -> CliResult<()> {
    let rows: Vec<_> = calibration_terms(c).into_iter().map(term_cells).collect();
    write_table(&out(cfg, "calibration.csv"), &TERM_HEADER, &rows)
}

fn write_blp(cfg: &RunConfig, terms: &[Term]) -> CliResult<()> {
    let rows: Vec<_> = terms.iter().map(term_cells).collect();
    write_table(&out(cfg, "blp.csv"), &TERM_HEADER, &rows)
}

#[derive(Serialize)]
struct ForestParamsJson {
    num_trees: usize,
    nuisance_trees: usize,
    min_leaf: usize,
    min_treated: usize,
    min_control: usize,
    subsample_fraction: f64,
    mtry: Option<usize>,
    clip: (f64, f64),
    select_vars: crate::config::SelectVars,
}

#[derive(Serialize)]
struct TruthJson {
    ate_true: f64,
    att_true: f64,
    ate_bias: f64,
    att_bias: f64,
    /// Correlation of the unit effect estimates with the true effects.
    tau_correlation: Option<f64>,
    tau_rmse: f64,
}

#[derive(Serialize)]
struct CateSummary {
    mean: f64,
    sd: f64,
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct ForestJson {
    schema_version: &'static str,
    command: &'static str,
    seed: u64,
    n: usize,
    imputations: usize,
    params: ForestParamsJson,
    features: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected_features: Option<Vec<Vec<String>>>,
    importance: Vec<ImportanceRow>,
    ate: EstimateReport<f64>,
    att: EstimateReport<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<TruthJson>,
    cate: CateSummary,
    subgroup_var: String,
    subgroups: Vec<Row>,
    rank: RankSummary,
    calibration: CalibrationSummary,
    blp: Vec<Term>,
    oob_uncovered_units: usize,
    fallback_units: usize,
}

fn cate_summary(tau: &[f64]) -> CateSummary {
    let n = tau.len() as f64;
    let mean = tau.iter().sum::<f64>() / n;
    let var = tau.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    CateSummary {
        mean,
        sd: var.sqrt(),
        min: tau.iter().copied().fold(f64::INFINITY, f64::min),
        max: tau.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

pub fn forest(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed()?;
    let inputs = load_inputs(cfg)?;
    complete(&inputs)?;
    let ds0 = &inputs.datasets[0];
    let truth = load_truth(cfg, ds0.n())?;
    let params = crate::analysis::forest_params(cfg)?;
    let fits = fit_all(&inputs, cfg, seed)?;
    let scores: Vec<UnitScores> = fits.iter().map(|f| f.scores.clone()).collect();
    let datasets = &inputs.datasets;

    let importance = mean_importance(&fits);
    let importance_rows = importance_table(ds0.column_names(), &importance);
    let subgroup_var = cfg
        .subgroup_var
        .clone()
        .unwrap_or_else(|| most_important(ds0, &importance));
    let labels = datasets
        .iter()
        .map(|d| subgroup_labels(d, &subgroup_var))
        .collect::<CliResult<Vec<_>>>()?;
    let subgroups = pooled_subgroups(datasets, &scores, &labels)?;
    let rank = pooled_rank(datasets, &scores, cfg.num_rankings.max(1))?;
    let calibration = pooled_calibration(datasets, &scores)?;
    let blp = pooled_blp(datasets, &scores, &RunConfig::list(&cfg.blp_vars))?;
    let ate = pool_reports(&fits.iter().map(|f| f.ate.clone()).collect::<Vec<_>>())?;
    let att = pool_reports(&fits.iter().map(|f| f.att.clone()).collect::<Vec<_>>())?;
    let tau = mean_tau(&scores);

    let truth_json = truth.as_ref().map(|t| {
        let sq = tau.iter().zip(&t.tau).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / tau.len() as f64;
        let r = pearson(&tau, &t.tau);
        TruthJson {
            ate_true: t.file.ate_true,
            att_true: t.file.att_true,
            ate_bias: ate.estimate - t.file.ate_true,
            att_bias: att.estimate - t.file.att_true,
            tau_correlation: r.is_finite().then_some(r),
            tau_rmse: sq.sqrt(),
        }
    });

    write_scores(&out(cfg, "cate.csv"), &scores)?;
    let hist: Vec<Vec<String>> = histogram(&tau, cfg.hist_bins)
        .into_iter()
        .map(|(lo, hi, c)| vec![num(lo), num(hi), c.to_string()])
        .collect();
    write_table(&out(cfg, "cate_hist.csv"), &["bin_lo", "bin_hi", "count"], &hist)?;
    let imp: Vec<Vec<String>> = importance_rows
        .iter()
        .map(|r| vec![r.feature.clone(), num(r.importance), r.rank.to_string()])
        .collect();
    write_table(&out(cfg, "importance.csv"), &["feature", "importance", "rank"], &imp)?;
    let sub: Vec<_> = subgroups.iter().map(row_cells).collect();
    write_table(&out(cfg, "subgroups.csv"), &ROW_HEADER, &sub)?;
    write_rank(cfg, &rank)?;
    let effects: Vec<_> = [("ATE", &ate), ("ATT", &att)]
        .into_iter()
        .map(|(name, r)| row_cells(&Row::from_report(name, r)))
        .collect();
    write_table(&out(cfg, "ate_att.csv"), &ROW_HEADER, &effects)?;
    write_blp(cfg, &blp)?;
    write_calibration(cfg, &calibration)?;

    let names = ds0.column_names();
    let selected = (cfg.select_vars == crate::config::SelectVars::Mean).then(|| {
        fits.iter()
            .map(|f| {
                f.selected
                    .as_ref()
                    .map_or_else(|| names.to_vec(), |s| s.iter().map(|&j| names[j].clone()).collect())
            })
            .collect()
    });
    write_json(
        &out(cfg, "forest.json"),
        &ForestJson {
            schema_version: SCHEMA_VERSION,
            command: "forest",
            seed,
            n: ds0.n(),
            imputations: fits.len(),
            params: ForestParamsJson {
                num_trees: params.num_trees,
                nuisance_trees: params.nuisance_tree_count(),
                min_leaf: params.min_leaf,
                min_treated: params.min_treated,
                min_control: params.min_control,
                subsample_fraction: params.subsample_fraction,
                mtry: params.mtry,
                clip: params.clip,
                select_vars: cfg.select_vars,
            },
            features: names.to_vec(),
            selected_features: selected,
            importance: importance_rows,
            ate,
            att,
            truth: truth_json,
            cate: cate_summary(&tau),
            subgroup_var,
            subgroups,
            rank,
            calibration,
            blp,
            oob_uncovered_units: fits.iter().map(|f| f.oob_uncovered).sum(),
            fallback_units: fits.iter().map(|f| f.fallback_units).sum(),
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct Wrapped<T> {
    schema_version: &'static str,
    command: &'static str,
    seed: u64,
    n: usize,
    imputations: usize,
    #[serde(flatten)]
    body: T,
}

fn wrapped<T>(command: &'static str, seed: u64, datasets: &[Dataset<f64>], body: T) -> Wrapped<T> {
    Wrapped {
        schema_version: SCHEMA_VERSION,
        command,
        seed,
        n: datasets[0].n(),
        imputations: datasets.len(),
        body,
    }
}

pub fn rank(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed()?;
    let inputs = load_inputs(cfg)?;
    complete(&inputs)?;
    let scores = unit_scores(&inputs, cfg, seed)?;
    let rank = pooled_rank(&inputs.datasets, &scores, cfg.num_rankings.max(1))?;
    write_rank(cfg, &rank)?;
    write_json(&out(cfg, "rank.json"), &wrapped("rank", seed, &inputs.datasets, rank))
}

#[derive(Serialize)]
struct BlpBody {
    terms: Vec<Term>,
}

pub fn blp(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed()?;
    let inputs = load_inputs(cfg)?;
    complete(&inputs)?;
    let scores = unit_scores(&inputs, cfg, seed)?;
    let terms = pooled_blp(&inputs.datasets, &scores, &RunConfig::list(&cfg.blp_vars))?;
    write_blp(cfg, &terms)?;
    write_json(&out(cfg, "blp.json"), &wrapped("blp", seed, &inputs.datasets, BlpBody { terms }))
}

pub fn calibrate(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed()?;
    let inputs = load_inputs(cfg)?;
    complete(&inputs)?;
    let scores = unit_scores(&inputs, cfg, seed)?;
    let c = pooled_calibration(&inputs.datasets, &scores)?;
    write_calibration(cfg, &c)?;
    write_json(&out(cfg, "calibration.json"), &wrapped("calibrate", seed, &inputs.datasets, c))
}

/// Sections of `report.json`, in order, with the file each is read from.
pub const REPORT_SECTIONS: [(&str, &str); 8] = [
    ("truth", "truth.json"),
    ("imputations", "imputations.json"),
    ("balance", "balance.json"),
    ("estimate", "estimate.json"),
    ("forest", "forest.json"),
    ("rank", "rank.json"),
    ("blp", "blp.json"),
    ("calibration", "calibration.json"),
];

pub fn report(cfg: &RunConfig) -> CliResult<()> {
    let seed = cfg.seed()?;
    let dir = cfg.run_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let mut sections = Map::new();
    for (key, file) in REPORT_SECTIONS {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        sections.insert(key.to_string(), value);
    }
    if sections.is_empty() {
        return Err(config_err(format!("no command outputs found in {}", dir.display())));
    }
    let md = render_markdown(&sections);
    let mut doc = Map::new();
    doc.insert("schema_version".into(), SCHEMA_VERSION.into());
    doc.insert("command".into(), "report".into());
    doc.insert("seed".into(), seed.into());
    doc.insert("sections".into(), Value::Object(sections));
    write_json(&out(cfg, "report.json"), &Value::Object(doc))?;
    write_text(&out(cfg, "report.md"), &md)
}

fn cell(v: &Value) -> String {
    match v {
        Value::Number(x) => match x.as_f64() {
            Some(f) if x.is_f64() => format!("{f:.4}"),
            _ => x.to_string(),
        },
        Value::String(s) => s.clone(),
        Value::Null => "NA".into(),
        other => other.to_string(),
    }
}

fn md_table(out: &mut String, header: &[&str], rows: &[Value]) {
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        let cells: Vec<String> = header.iter().map(|h| cell(&r[*h])).collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out.push('\n');
}

const ROW_KEYS: [&str; 6] = ["name", "n", "estimate", "se", "ci_lo", "ci_hi"];

fn render_markdown(s: &Map<String, Value>) -> String {
    let mut md = String::from("# Run report\n\n");
    if let Some(t) = s.get("truth") {
        md.push_str(&format!(
            "## Simulation\n\nPreset `{}`, n = {}, seed {}. True ATE {}, true ATT {}.\n\n",
            cell(&t["preset"]),
            cell(&t["n"]),
            cell(&t["seed"]),
            cell(&t["ate_true"]),
            cell(&t["att_true"])
        ));
    }
    if let Some(b) = s.get("balance") {
        md.push_str(&format!(
            "## Balance\n\nMax SMD {} unweighted, {} after weighting (threshold {}).\n\n",
            cell(&b["max_smd_unweighted"]),
            cell(&b["max_smd_weighted"]),
            cell(&b["threshold"])
        ));
        md_table(&mut md, &["covariate", "smd_unweighted", "smd_weighted"], b["rows"].as_array().map_or(&[], |v| v));
    }
    if let Some(e) = s.get("estimate") {
        md.push_str("## Average effects\n\n");
        let rows = e["estimates"].as_array().map_or(&[][..], |v| v);
        let has_truth = rows.first().is_some_and(|r| r.get("bias").is_some());
        let mut header = vec!["estimand", "estimator", "estimate", "se", "ci_lo", "ci_hi"];
        if has_truth {
            header.push("bias");
        }
        md_table(&mut md, &header, rows);
    }
    if let Some(f) = s.get("forest") {
        md.push_str("## Causal forest\n\n");
        md_table(&mut md, &["estimand", "estimate", "se", "ci_lo", "ci_hi"], &[f["ate"].clone(), f["att"].clone()]);
        md.push_str("Variable importance:\n\n");
        let imp = f["importance"].as_array().map_or(&[][..], |v| v);
        md_table(&mut md, &["rank", "feature", "importance"], &imp[..imp.len().min(10)]);
        md.push_str(&format!("Subgroups by `{}`:\n\n", cell(&f["subgroup_var"])));
        md_table(&mut md, &ROW_KEYS, f["subgroups"].as_array().map_or(&[], |v| v));
    }
    let rank = s.get("rank").or_else(|| s.get("forest").map(|f| &f["rank"]));
    if let Some(r) = rank {
        md.push_str("## Effects by predicted-effect quantile\n\n");
        md_table(&mut md, &ROW_KEYS, r["bins"].as_array().map_or(&[], |v| v));
    }
    let cal = s.get("calibration").or_else(|| s.get("forest").map(|f| &f["calibration"]));
    if let Some(c) = cal {
        md.push_str("## Calibration\n\n");
        let rows: Vec<Value> = [&c["mean_forest_prediction"], &c["differential_forest_prediction"]]
            .into_iter()
            .filter(|v| !v.is_null())
            .cloned()
            .collect();
        md_table(&mut md, &["term", "estimate", "se", "t", "p_value"], &rows);
    }
    let blp = s
        .get("blp")
        .map(|b| &b["terms"])
        .or_else(|| s.get("forest").map(|f| &f["blp"]));
    if let Some(b) = blp {
        md.push_str("## Best linear projection\n\n");
        md_table(&mut md, &TERM_HEADER, b.as_array().map_or(&[], |v| v));
    }
    md
}

/// Existence check for every input path, so bad paths fail as configuration
/// errors before any work.
pub fn check_paths(cfg: &RunConfig) -> CliResult<()> {
    let named = [("--schema", &cfg.schema), ("--truth", &cfg.truth), ("--scores", &cfg.scores), ("--run-dir", &cfg.run_dir)];
    let data = cfg.data.iter().map(|p| ("--data", p));
    for (flag, path) in named
        .iter()
        .filter_map(|(f, p)| p.as_ref().map(|p| (*f, p)))
        .chain(data)
    {
        if !Path::new(path).exists() {
            return Err(config_err(format!("{flag} {} does not exist", path.display())));
        }
    }
    Ok(())
}
