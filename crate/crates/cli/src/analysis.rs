//! Per-imputation forest diagnostics and their pooling.

use std::collections::BTreeMap;

use hte_core::causal_forest::{
    blp_from_scores, calibration_from_scores, cf_ate, cf_fit, cf_variable_importance, quantile_labels,
    rank_from_scores, select_above_mean, subgroup_from_scores, CausalForestParams, RANK_FOLDS,
};
use hte_core::dataset::{rubin_pool, ColumnKind};
use hte_core::estimators::{EstimateReport, Target, Z95};
use hte_core::rng::derive_seed;
use hte_core::stats::{normal_cdf, two_sided_p};
use hte_core::{Dataset, Matrix};
use serde::Serialize;

use crate::config::SelectVars;
use crate::io::UnitScores;
use crate::{CliError, CliResult, RunConfig};

/// Numeric covariates with at most this many distinct values are grouped by
/// value rather than by quintile.
const MAX_VALUE_GROUPS: usize = 10;
const SUBGROUP_QUANTILES: usize = 5;

pub fn forest_params(cfg: &RunConfig) -> CliResult<CausalForestParams> {
    if cfg.num_trees == 0 {
        return Err(CliError::Config("--num-trees must be positive".into()));
    }
    if !(cfg.subsample_fraction > 0.0 && cfg.subsample_fraction <= 1.0) {
        return Err(CliError::Config("--subsample-fraction must lie in (0, 1]".into()));
    }
    Ok(CausalForestParams {
        num_trees: cfg.num_trees,
        min_leaf: cfg.min_leaf,
        min_treated: cfg.min_treated,
        min_control: cfg.min_control,
        subsample_fraction: cfg.subsample_fraction,
        mtry: cfg.mtry,
        clip: cfg.clip()?,
        ..CausalForestParams::default()
    })
}

/// One imputation's forest, reduced to what the reports need.
pub struct ForestFit {
    pub scores: UnitScores,
    /// Importance over all covariates of the first pass.
    pub importance: Vec<f64>,
    /// Covariates kept by `--select-vars mean`.
    pub selected: Option<Vec<usize>>,
    pub ate: EstimateReport<f64>,
    pub att: EstimateReport<f64>,
    pub oob_uncovered: usize,
    pub fallback_units: usize,
}

pub fn fit_forest(ds: &Dataset<f64>, cfg: &RunConfig, seed: u64, k: usize) -> CliResult<ForestFit> {
    let params = forest_params(cfg)?;
    let forest = cf_fit(ds, &params, derive_seed(seed, "forest", k as u64))?;
    let importance = cf_variable_importance(&forest);
    let (forest, selected) = match cfg.select_vars {
        SelectVars::None => (forest, None),
        SelectVars::Mean => {
            let keep = select_above_mean(&importance);
            if keep.is_empty() {
                log::warn!("no covariate has above-mean importance; keeping the first pass");
                (forest, None)
            } else {
                let refit = cf_fit(&ds.select_columns(&keep)?, &params, derive_seed(seed, "refit", k as u64))?;
                (refit, Some(keep))
            }
        }
    };
    Ok(ForestFit {
        scores: UnitScores {
            tau_hat: forest.oob_tau.clone(),
            score: forest.scores()?,
        },
        importance,
        selected,
        ate: cf_ate(&forest, Target::All)?,
        att: cf_ate(&forest, Target::Treated)?,
        oob_uncovered: forest.oob_uncovered.len(),
        fallback_units: forest.fallback_units.len(),
    })
}

/// Rubin's rules, or the single pair itself.
pub fn pool(pairs: &[(f64, f64)]) -> CliResult<(f64, f64)> {
    match pairs {
        [] => Err(CliError::Runtime(anyhow::anyhow!("nothing to pool"))),
        [one] => Ok(*one),
        _ => Ok(rubin_pool(pairs)?),
    }
}

pub fn pool_reports(reports: &[EstimateReport<f64>]) -> CliResult<EstimateReport<f64>> {
    let pairs: Vec<(f64, f64)> = reports.iter().map(|r| (r.estimate, r.se)).collect();
    let (est, se) = pool(&pairs)?;
    let first = &reports[0];
    let name = if reports.len() > 1 {
        format!("{}+rubin", first.estimator)
    } else {
        first.estimator.clone()
    };
    Ok(EstimateReport::new(first.estimand.clone(), &name, est, se, first.n))
}

/// Pooled importance: the mean over imputations.
pub fn mean_importance(fits: &[ForestFit]) -> Vec<f64> {
    let p = fits[0].importance.len();
    (0..p)
        .map(|j| fits.iter().map(|f| f.importance[j]).sum::<f64>() / fits.len() as f64)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ImportanceRow {
    pub feature: String,
    pub importance: f64,
    pub rank: usize,
}

/// Sorted by decreasing importance, ties by column order.
pub fn importance_table(names: &[String], importance: &[f64]) -> Vec<ImportanceRow> {
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .enumerate()
        .map(|(r, j)| ImportanceRow {
            feature: names[j].clone(),
            importance: importance[j],
            rank: r + 1,
        })
        .collect()
}

/// Source covariate of the most important column; a categorical is named by
/// its source rather than a level.
pub fn most_important(ds: &Dataset<f64>, importance: &[f64]) -> String {
    let best = (0..importance.len())
        .reduce(|b, j| if importance[j] > importance[b] { j } else { b })
        .unwrap_or(0);
    match &ds.column_kinds()[best] {
        ColumnKind::OneHot { source, .. } => source.clone(),
        _ => ds.column_names()[best].clone(),
    }
}

/// Group labels for `var`: the level of a categorical, the value of a
/// low-cardinality numeric, otherwise its quintile.
pub fn subgroup_labels(ds: &Dataset<f64>, var: &str) -> CliResult<Vec<String>> {
    let n = ds.n();
    let x = ds.covariates();
    let levels: Vec<(usize, &str)> = ds
        .column_kinds()
        .iter()
        .enumerate()
        .filter_map(|(j, k)| match k {
            ColumnKind::OneHot { source, level } if source == var => Some((j, level.as_str())),
            _ => None,
        })
        .collect();
    if !levels.is_empty() {
        return Ok((0..n)
            .map(|i| {
                levels
                    .iter()
                    .find(|&&(j, _)| x[(i, j)] > 0.5)
                    .map_or_else(|| "NA".to_string(), |&(_, l)| l.to_string())
            })
            .collect());
    }
    let j = ds
        .column_index(var)
        .ok_or_else(|| CliError::Config(format!("unknown subgroup covariate `{var}`")))?;
    let values = x.column(j);
    let mut distinct = values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= MAX_VALUE_GROUPS {
        Ok(values.iter().map(|v| format!("{var}={v}")).collect())
    } else {
        Ok(quantile_labels(&values, SUBGROUP_QUANTILES))
    }
}

/// Estimate row of the JSON and CSV reports.
#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub name: String,
    pub n: usize,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Row {
    fn from_pair(name: String, n: usize, (est, se): (f64, f64)) -> Self {
        Self {
            name,
            n,
            estimate: Some(est),
            se: Some(se),
            ci_lo: Some(est - Z95 * se),
            ci_hi: Some(est + Z95 * se),
            reason: None,
        }
    }

    pub fn from_report(name: &str, r: &EstimateReport<f64>) -> Self {
        Self::from_pair(name.to_string(), r.n, (r.estimate, r.se))
    }
}

/// Subgroup effects per imputation, pooled by label. Groups lacking an
/// estimate in any imputation carry the first reason seen.
pub fn pooled_subgroups(
    datasets: &[Dataset<f64>],
    scores: &[UnitScores],
    labels: &[Vec<String>],
) -> CliResult<Vec<Row>> {
    let mut groups: BTreeMap<String, (usize, Vec<(f64, f64)>, Option<String>, usize)> = BTreeMap::new();
    for ((ds, s), l) in datasets.iter().zip(scores).zip(labels) {
        for g in subgroup_from_scores(&s.score, ds.weights(), ds.treatment(), l)? {
            let entry = groups.entry(g.group.clone()).or_insert((g.n, Vec::new(), None, 0));
            entry.3 += 1;
            match (g.report, g.reason) {
                (Some(r), _) => entry.1.push((r.estimate, r.se)),
                (None, reason) => {
                    entry.2.get_or_insert(reason.unwrap_or_default());
                }
            }
        }
    }
    let m = datasets.len();
    groups
        .into_iter()
        .map(|(name, (n, pairs, reason, seen))| {
            if pairs.len() == m {
                Ok(Row::from_pair(name, n, pool(&pairs)?))
            } else {
                Ok(Row {
                    name,
                    n,
                    estimate: None,
                    se: None,
                    ci_lo: None,
                    ci_hi: None,
                    reason: Some(reason.unwrap_or_else(|| format!("present in {seen} of {m} imputations"))),
                })
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct WaldTest {
    pub imputation: usize,
    pub stat: Option<f64>,
    pub df: usize,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankSummary {
    pub num_rankings: usize,
    pub folds: usize,
    pub bins: Vec<Row>,
    /// Equality of bin means, per imputation.
    pub wald: Vec<WaldTest>,
    pub fallback: bool,
}

pub fn pooled_rank(
    datasets: &[Dataset<f64>],
    scores: &[UnitScores],
    num_rankings: usize,
) -> CliResult<RankSummary> {
    let mut bins: BTreeMap<String, (usize, Vec<(f64, f64)>)> = BTreeMap::new();
    let mut wald = Vec::new();
    let mut fallback = false;
    for (k, (ds, s)) in datasets.iter().zip(scores).enumerate() {
        let r = rank_from_scores(&s.score, &s.tau_hat, ds.weights(), num_rankings, RANK_FOLDS)?;
        fallback |= r.fallback;
        for b in &r.bins {
            let key = b.estimand.to_string();
            let label = key.strip_prefix("CATE[").and_then(|x| x.strip_suffix(']')).unwrap_or(&key);
            bins.entry(label.to_string()).or_insert((b.n, Vec::new())).1.push((b.estimate, b.se));
        }
        wald.push(WaldTest {
            imputation: k + 1,
            stat: r.wald_stat,
            df: r.df,
            p_value: r.p_value,
        });
    }
    let mut rows = bins
        .into_iter()
        .map(|(name, (n, pairs))| Ok(Row::from_pair(name, n, pool(&pairs)?)))
        .collect::<CliResult<Vec<_>>>()?;
    // Q10 after Q9
    rows.sort_by_key(|r| r.name.trim_start_matches('Q').parse::<usize>().unwrap_or(usize::MAX));
    Ok(RankSummary {
        num_rankings,
        folds: RANK_FOLDS,
        bins: rows,
        wald,
        fallback,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Term {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p_value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Term {
    fn new(term: &str, (estimate, se): (f64, f64), p: impl Fn(f64) -> f64) -> Self {
        let t = estimate / se;
        Self {
            term: term.to_string(),
            estimate,
            se,
            t,
            p_value: p(t),
            ci_lo: estimate - Z95 * se,
            ci_hi: estimate + Z95 * se,
        }
    }
}

fn one_sided(t: f64) -> f64 {
    if t.is_nan() {
        1.0
    } else {
        1.0 - normal_cdf(t)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSummary {
    /// p-values are one-sided, against a coefficient of zero.
    pub mean_forest_prediction: Term,
    pub differential_forest_prediction: Option<Term>,
}

pub fn pooled_calibration(datasets: &[Dataset<f64>], scores: &[UnitScores]) -> CliResult<CalibrationSummary> {
    let mut mean = Vec::new();
    let mut diff = Vec::new();
    for (ds, s) in datasets.iter().zip(scores) {
        let c = calibration_from_scores(&s.score, &s.tau_hat, ds.weights())?;
        mean.push((c.mean_forest_prediction.estimate, c.mean_forest_prediction.se));
        if let Some(d) = c.differential_forest_prediction {
            diff.push((d.estimate, d.se));
        }
    }
    let differential = if diff.len() == datasets.len() {
        Some(Term::new("differential_forest_prediction", pool(&diff)?, one_sided))
    } else {
        None
    };
    Ok(CalibrationSummary {
        mean_forest_prediction: Term::new("mean_forest_prediction", pool(&mean)?, one_sided),
        differential_forest_prediction: differential,
    })
}

/// Columns of the projection: named covariates, categoricals expanded to
/// their non-reference levels. Defaults to every non-indicator covariate.
pub fn blp_columns(ds: &Dataset<f64>, vars: &[String]) -> CliResult<Vec<usize>> {
    let kinds = ds.column_kinds();
    if vars.is_empty() {
        return Ok((0..ds.p()).filter(|&j| !matches!(kinds[j], ColumnKind::OneHot { .. })).collect());
    }
    let mut cols = Vec::new();
    for v in vars {
        if let Some(j) = ds.column_index(v) {
            cols.push(j);
            continue;
        }
        let levels: Vec<usize> = (0..ds.p())
            .filter(|&j| matches!(&kinds[j], ColumnKind::OneHot { source, .. } if source == v))
            .collect();
        if levels.is_empty() {
            return Err(CliError::Config(format!("unknown projection covariate `{v}`")));
        }
        cols.extend_from_slice(&levels[1..]);
    }
    Ok(cols)
}

pub fn pooled_blp(datasets: &[Dataset<f64>], scores: &[UnitScores], vars: &[String]) -> CliResult<Vec<Term>> {
    let cols = blp_columns(&datasets[0], vars)?;
    let names: Vec<String> = cols.iter().map(|&j| datasets[0].column_names()[j].clone()).collect();
    let mut per_term: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cols.len() + 1];
    let mut terms = Vec::new();
    for (ds, s) in datasets.iter().zip(scores) {
        let a: Matrix<f64> = ds.covariates().select_columns(&cols);
        let rows = blp_from_scores(&s.score, ds.weights(), &a, &names)?;
        if terms.is_empty() {
            terms = rows.iter().map(|r| r.name.clone()).collect();
        }
        for (slot, r) in per_term.iter_mut().zip(rows) {
            slot.push((r.estimate, r.se));
        }
    }
    terms
        .iter()
        .zip(&per_term)
        .map(|(t, pairs)| Ok(Term::new(t, pool(pairs)?, two_sided_p)))
        .collect()
}

/// Equal-width histogram of `values` over `[min, max]`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![(lo, hi, values.len())];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect()
}

/// Unit-wise mean of the imputations' effect estimates.
pub fn mean_tau(scores: &[UnitScores]) -> Vec<f64> {
    let n = scores[0].tau_hat.len();
    (0..n)
        .map(|i| scores.iter().map(|s| s.tau_hat[i]).sum::<f64>() / scores.len() as f64)
        .collect()
}
