//! Residual-on-residual causal forest and its diagnostics.
//!
//! Stage one fits regression forests for `m(x) = E[Y | x]` and
//! `e(x) = E[W | x]` and keeps their out-of-bag predictions. Stage two grows
//! honest trees on the residuals `Y - m` and `W - e`, and the effect at `x` is
//! the forest-weighted residual regression slope
//! `sum a_i(x) Wr_i Yr_i / sum a_i(x) Wr_i^2`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{aipw_ate, aipw_scores, EstimateReport, Estimand, NuisanceEstimates, Target, DEFAULT_CLIP};
use crate::linear_models::{ols_fit, CovarianceType, LinearFit};
use crate::matrix::Matrix;
use crate::regression_forest::{default_mtry, draw_sample, rf_fit, ForestParams, RowSet};
use crate::rng::{derive_seed, stream};
use crate::scalar::Real;
use crate::stats::{chi_square_sf, mean_with_se, quantile_sorted, sorted_copy, two_sided_p, weighted_mean};
use crate::tree::{grow_presorted, FeatureOrder, GrowConfig, SideLimits, SplitRule, Tree, MAX_THRESHOLDS};

/// Denominators below this fall back to coarser leaves.
pub const MIN_DENOMINATOR: f64 = 1e-12;

/// Deepest split level counted by variable importance.
pub const IMPORTANCE_MAX_DEPTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalForestParams {
    pub num_trees: usize,
    pub min_leaf: usize,
    pub min_treated: usize,
    pub min_control: usize,
    pub subsample_fraction: f64,
    pub mtry: Option<usize>,
    pub max_depth: Option<usize>,
    pub clip: (f64, f64),
    /// Trees per nuisance forest; `None` means `max(50, num_trees / 4)`.
    pub nuisance_trees: Option<usize>,
}

impl Default for CausalForestParams {
    fn default() -> Self {
        Self {
            num_trees: 2000,
            min_leaf: 5,
            min_treated: 2,
            min_control: 2,
            subsample_fraction: 0.5,
            mtry: None,
            max_depth: None,
            clip: DEFAULT_CLIP,
            nuisance_trees: None,
        }
    }
}

impl CausalForestParams {
    pub fn nuisance_tree_count(&self) -> usize {
        self.nuisance_trees.unwrap_or((self.num_trees / 4).max(50))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalForestTree<F> {
    pub tree: Tree<F>,
    /// Per node: `sum s Wr Yr / sum s` over its estimation rows.
    pub num: Vec<F>,
    /// Per node: `sum s Wr^2 / sum s` over its estimation rows.
    pub den: Vec<F>,
    pub subsample: RowSet,
}

#[derive(Clone, Debug)]
pub struct CausalForest<F> {
    pub trees: Vec<CausalForestTree<F>>,
    pub params: CausalForestParams,
    pub seed: u64,
    /// Clipped OOB propensities and OOB outcome means.
    pub nuisance: NuisanceEstimates<F>,
    pub y_res: Vec<F>,
    pub w_res: Vec<F>,
    pub oob_tau: Vec<F>,
    /// Rows no tree left out; their `oob_tau` uses every tree.
    pub oob_uncovered: Vec<usize>,
    /// Rows whose estimate needed the parent-leaf fallback.
    pub fallback_units: Vec<usize>,
    pub feature_names: Vec<String>,
    data: Dataset<F>,
}

/// Centered gradient pseudo-outcomes of the node-local residual regression.
struct SlopeRule<'a, F> {
    yr: &'a [F],
    wr: &'a [F],
    s: &'a [F],
    rho: Vec<F>,
}

impl<F: Real> SplitRule<F> for SlopeRule<'_, F> {
    type Acc = (F, F);

    fn zero(&self) -> (F, F) {
        (F::zero(), F::zero())
    }

    fn prepare(&mut self, rows: &[usize]) {
        let (mut sw, mut sy, mut sx) = (F::zero(), F::zero(), F::zero());
        for &r in rows {
            sw = sw + self.s[r];
            sy = sy + self.s[r] * self.yr[r];
            sx = sx + self.s[r] * self.wr[r];
        }
        let (ybar, wbar) = (sy / sw, sx / sw);
        let (mut sxy, mut sxx) = (F::zero(), F::zero());
        for &r in rows {
            let dw = self.wr[r] - wbar;
            sxy = sxy + self.s[r] * dw * (self.yr[r] - ybar);
            sxx = sxx + self.s[r] * dw * dw;
        }
        let var = sxx / sw;
        let degenerate = !(var > F::lit(MIN_DENOMINATOR));
        let tau = if degenerate { F::zero() } else { sxy / sxx };
        for &r in rows {
            let dw = self.wr[r] - wbar;
            self.rho[r] = if degenerate {
                F::zero()
            } else {
                dw * ((self.yr[r] - ybar) - dw * tau) / var
            };
        }
    }

    fn add(&self, acc: &mut (F, F), r: usize) {
        acc.0 = acc.0 + self.s[r];
        acc.1 = acc.1 + self.s[r] * self.rho[r];
    }

    fn merge(&self, acc: &mut (F, F), other: &(F, F)) {
        acc.0 = acc.0 + other.0;
        acc.1 = acc.1 + other.1;
    }

    fn score(&self, acc: &(F, F)) -> Option<F> {
        (acc.0 > F::zero()).then(|| acc.1 * acc.1 / acc.0)
    }
}

fn check_params(p: &CausalForestParams) -> Result<()> {
    if p.num_trees == 0 {
        return Err(Error::Invalid("num_trees must be positive".into()));
    }
    if !(p.subsample_fraction > 0.0 && p.subsample_fraction <= 1.0) {
        return Err(Error::Invalid("subsample_fraction must lie in (0, 1]".into()));
    }
    let (lo, hi) = p.clip;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::Invalid(format!("clip bounds ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
    }
    Ok(())
}

pub fn cf_fit<F: Real>(ds: &Dataset<F>, params: &CausalForestParams, seed: u64) -> Result<CausalForest<F>> {
    check_params(params)?;
    ds.require_complete()?;
    ds.require_both_arms()?;
    let x = ds.covariates();
    let s = ds.weights();
    let y = ds.outcome();
    let wf = ds.treatment_f();

    let nuisance_params = |label: &str| ForestParams {
        num_trees: params.nuisance_tree_count(),
        min_leaf: params.min_leaf,
        subsample_fraction: params.subsample_fraction,
        mtry: params.mtry,
        honesty: true,
        max_depth: params.max_depth,
        seed: derive_seed(seed, label, 0),
    };
    let m_hat = rf_fit(x, y, &nuisance_params("cf-m"), Some(s))?.oob_predictions;
    let (lo, hi) = (F::lit(params.clip.0), F::lit(params.clip.1));
    let e_hat: Vec<F> = rf_fit(x, &wf, &nuisance_params("cf-e"), Some(s))?
        .oob_predictions
        .into_iter()
        .map(|e| e.max(lo).min(hi))
        .collect();
    fit_with_nuisances(ds, params, seed, m_hat, e_hat)
}

/// Stage two alone, on supplied OOB nuisance predictions. `e_hat` must
/// already lie within the clip bounds.
pub fn fit_with_nuisances<F: Real>(
    ds: &Dataset<F>,
    params: &CausalForestParams,
    seed: u64,
    m_hat: Vec<F>,
    e_hat: Vec<F>,
) -> Result<CausalForest<F>> {
    check_params(params)?;
    ds.require_complete()?;
    ds.require_both_arms()?;
    let n = ds.n();
    if m_hat.len() != n || e_hat.len() != n {
        return Err(Error::Dimension("nuisance vectors do not match the dataset".into()));
    }
    if n < 2 * params.min_leaf.max(1) {
        return Err(Error::Infeasible(format!("{n} rows cannot hold two leaves of {}", params.min_leaf)));
    }
    let (lo, hi) = (F::lit(params.clip.0), F::lit(params.clip.1));
    if let Some(i) = e_hat.iter().position(|&e| !(e >= lo && e <= hi)) {
        return Err(Error::PropensityOutOfBounds {
            index: i,
            value: e_hat[i].as_f64(),
            lo: params.clip.0,
            hi: params.clip.1,
        });
    }
    let x = ds.covariates();
    let s = ds.weights();
    let y_res: Vec<F> = ds.outcome().iter().zip(&m_hat).map(|(&y, &m)| y - m).collect();
    let w_res: Vec<F> = ds
        .treatment()
        .iter()
        .zip(&e_hat)
        .map(|(&w, &e)| if w { F::one() - e } else { -e })
        .collect();

    let cfg = GrowConfig {
        split_limits: SideLimits {
            min_total: params.min_leaf,
            min_treated: params.min_treated,
            min_control: params.min_control,
        },
        est_limits: SideLimits {
            min_total: 1,
            min_treated: 1,
            min_control: 1,
        },
        mtry: params.mtry.unwrap_or_else(|| default_mtry(x.ncols())),
        max_depth: params.max_depth,
        max_thresholds: MAX_THRESHOLDS,
    };
    let order = FeatureOrder::new(x);
    let trees: Vec<CausalForestTree<F>> = (0..params.num_trees)
        .into_par_iter()
        .map(|b| {
            let (split, est) = draw_sample(n, params.subsample_fraction, true, seed, "cf-sample", b);
            let subsample = RowSet::new(n, split.iter().chain(&est).copied());
            let mut rule = SlopeRule {
                yr: &y_res,
                wr: &w_res,
                s,
                rho: vec![F::zero(); n],
            };
            let mut rng = stream(seed, "cf-tree", b as u64);
            let tree = grow_presorted(x, &order, Some(ds.treatment()), split, est, &mut rule, &cfg, &mut rng);
            let (num, den) = (0..tree.nodes.len())
                .map(|k| {
                    let (mut sw, mut a, mut d) = (F::zero(), F::zero(), F::zero());
                    for &r in tree.est_rows_of(k) {
                        sw = sw + s[r];
                        a = a + s[r] * w_res[r] * y_res[r];
                        d = d + s[r] * w_res[r] * w_res[r];
                    }
                    if sw > F::zero() {
                        (a / sw, d / sw)
                    } else {
                        (F::zero(), F::zero())
                    }
                })
                .unzip();
            CausalForestTree {
                tree,
                num,
                den,
                subsample,
            }
        })
        .collect();

    let mut nuisance = NuisanceEstimates::empty(n);
    nuisance.e_hat = Some(e_hat);
    nuisance.m_hat = Some(m_hat);
    nuisance.clip_bounds = (lo, hi);

    let mut forest = CausalForest {
        trees,
        params: params.clone(),
        seed,
        nuisance,
        y_res,
        w_res,
        oob_tau: Vec::new(),
        oob_uncovered: Vec::new(),
        fallback_units: Vec::new(),
        feature_names: ds.column_names().to_vec(),
        data: ds.clone(),
    };
    let oob: Vec<(F, bool, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            match forest.estimate(row, Some(i)) {
                Some((tau, fb)) => (tau, false, fb),
                None => {
                    let (tau, fb) = forest.estimate(row, None).expect("forest has trees");
                    (tau, true, fb)
                }
            }
        })
        .collect();
    forest.oob_uncovered = (0..n).filter(|&i| oob[i].1).collect();
    forest.fallback_units = (0..n).filter(|&i| oob[i].2).collect();
    forest.oob_tau = oob.into_iter().map(|o| o.0).collect();
    if !forest.oob_uncovered.is_empty() {
        log::warn!("{} rows are in every subsample; using all trees for them", forest.oob_uncovered.len());
    }
    if !forest.fallback_units.is_empty() {
        log::warn!(
            "{} rows had a degenerate residual neighbourhood; used parent leaves",
            forest.fallback_units.len()
        );
    }
    Ok(forest)
}

impl<F: Real> CausalForest<F> {
    pub fn data(&self) -> &Dataset<F> {
        &self.data
    }

    fn trees_for(&self, exclude: Option<usize>) -> impl Iterator<Item = &CausalForestTree<F>> {
        self.trees
            .iter()
            .filter(move |t| exclude.is_none_or(|i| !t.subsample.contains(i)))
    }

    /// Closed-form slope at `x` over trees not containing `exclude`, and
    /// whether the parent fallback was used. `None` if no tree qualifies.
    fn estimate(&self, x: &[F], exclude: Option<usize>) -> Option<(F, bool)> {
        let mut nodes: Vec<(&CausalForestTree<F>, usize)> =
            self.trees_for(exclude).map(|t| (t, t.tree.leaf_of(x))).collect();
        if nodes.is_empty() {
            return None;
        }
        let count = F::from_count(nodes.len());
        let mut fallback = false;
        loop {
            let (num, den) = nodes
                .iter()
                .fold((F::zero(), F::zero()), |(a, b), &(t, k)| (a + t.num[k], b + t.den[k]));
            let at_root = nodes.iter().all(|&(t, k)| t.tree.nodes[k].parent.is_none());
            if den / count >= F::lit(MIN_DENOMINATOR) || at_root {
                let tau = if den > F::zero() { num / den } else { F::zero() };
                return Some((tau, fallback));
            }
            fallback = true;
            for (t, k) in nodes.iter_mut() {
                if let Some(p) = t.tree.nodes[*k].parent {
                    *k = p;
                }
            }
        }
    }

    pub fn predict_row(&self, x: &[F]) -> F {
        self.estimate(x, None).expect("forest has trees").0
    }

    /// AIPW scores built on the forest nuisances and `oob_tau`.
    pub fn scores(&self) -> Result<Vec<F>> {
        aipw_scores(&self.data, &self.nuisance, &self.oob_tau)
    }
}

pub fn cf_predict<F: Real>(forest: &CausalForest<F>, x: &Matrix<F>) -> Result<Vec<F>> {
    if x.ncols() != forest.feature_names.len() {
        return Err(Error::Dimension(format!(
            "forest has {} features, query has {}",
            forest.feature_names.len(),
            x.ncols()
        )));
    }
    Ok((0..x.nrows())
        .into_par_iter()
        .map(|i| forest.predict_row(x.row(i)))
        .collect())
}

/// Sparse forest weights `(row, alpha)` for a query point, sorted by row.
/// With `exclude = Some(i)` only trees whose subsample omits `i` count.
pub fn forest_weights<F: Real>(forest: &CausalForest<F>, x: &[F], exclude: Option<usize>) -> Vec<(usize, F)> {
    let s = forest.data.weights();
    let trees: Vec<&CausalForestTree<F>> = forest.trees_for(exclude).collect();
    let b = F::from_count(trees.len());
    let mut acc: BTreeMap<usize, F> = BTreeMap::new();
    for t in trees {
        let rows = t.tree.est_rows_of(t.tree.leaf_of(x));
        let total = rows.iter().fold(F::zero(), |a, &r| a + s[r]);
        for &r in rows {
            let e = acc.entry(r).or_insert(F::zero());
            *e = *e + s[r] / total / b;
        }
    }
    acc.into_iter().collect()
}

pub fn cf_ate<F: Real>(forest: &CausalForest<F>, target: Target) -> Result<EstimateReport<F>> {
    let n = forest.data.n();
    match target {
        Target::All => {
            let scores = forest.scores()?;
            let (est, se) = mean_with_se(&scores, forest.data.weights());
            Ok(EstimateReport::new(Estimand::Ate, "causal_forest", est, se, n))
        }
        Target::Treated => {
            let nuis = forest.nuisance.clone().with_tau(&forest.oob_tau)?;
            let mut r = aipw_ate(&forest.data, &nuis, Target::Treated)?;
            r.estimator = "causal_forest".into();
            Ok(r)
        }
    }
}

/// Depth-weighted split frequency: a split at depth `d` (root `d = 1`)
/// counts `0.5^d`, for `d <= 4`; scores are normalized to sum to one, or all
/// zero when no tree split.
pub fn cf_variable_importance<F: Real>(forest: &CausalForest<F>) -> Vec<F> {
    let p = forest.feature_names.len();
    let mut score = vec![0.0f64; p];
    for t in &forest.trees {
        for node in &t.tree.nodes {
            if let Some(s) = &node.split {
                let d = node.depth + 1;
                if d <= IMPORTANCE_MAX_DEPTH {
                    score[s.feature] += 0.5f64.powi(d as i32);
                }
            }
        }
    }
    let total: f64 = score.iter().sum();
    score
        .into_iter()
        .map(|v| if total > 0.0 { F::lit(v / total) } else { F::zero() })
        .collect()
}

/// Effect estimate for one group of units, or the reason it is missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupCate<F> {
    pub group: String,
    pub n: usize,
    pub report: Option<EstimateReport<F>>,
    pub reason: Option<String>,
}

/// Labels `Q1..Qk` from type-7 quantile breaks of `values`, lowest break
/// included in the first bin.
pub fn quantile_labels<F: Real>(values: &[F], k: usize) -> Vec<String> {
    bins_by_quantile(values, k).into_iter().map(|b| format!("Q{}", b + 1)).collect()
}

fn bins_by_quantile<F: Real>(values: &[F], k: usize) -> Vec<usize> {
    let sorted = sorted_copy(values);
    let breaks: Vec<F> = (1..k).map(|j| quantile_sorted(&sorted, j as f64 / k as f64)).collect();
    values
        .iter()
        .map(|&v| breaks.iter().position(|&b| v <= b).unwrap_or(k - 1))
        .collect()
}

/// Per-group AIPW score means, from raw scores.
pub fn subgroup_from_scores<F: Real>(
    scores: &[F],
    weights: &[F],
    treatment: &[bool],
    labels: &[String],
) -> Result<Vec<SubgroupCate<F>>> {
    let n = scores.len();
    if labels.len() != n || weights.len() != n || treatment.len() != n {
        return Err(Error::Dimension("group labels must match the data".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_str()).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(g, rows)| {
            let treated = rows.iter().filter(|&&r| treatment[r]).count();
            let base = SubgroupCate {
                group: g.to_string(),
                n: rows.len(),
                report: None,
                reason: None,
            };
            if treated == 0 || treated == rows.len() {
                let arm = if treated == 0 { "treated" } else { "control" };
                return SubgroupCate {
                    reason: Some(format!("no {arm} units")),
                    ..base
                };
            }
            let v: Vec<F> = rows.iter().map(|&r| scores[r]).collect();
            let w: Vec<F> = rows.iter().map(|&r| weights[r]).collect();
            let (est, se) = mean_with_se(&v, &w);
            SubgroupCate {
                report: Some(EstimateReport::new(
                    Estimand::Cate(g.to_string()),
                    "causal_forest",
                    est,
                    se,
                    rows.len(),
                )),
                ..base
            }
        })
        .collect())
}

pub fn cf_subgroup_cate<F: Real>(forest: &CausalForest<F>, labels: &[String]) -> Result<Vec<SubgroupCate<F>>> {
    let scores = forest.scores()?;
    subgroup_from_scores(&scores, forest.data.weights(), forest.data.treatment(), labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult<F> {
    pub bins: Vec<EstimateReport<F>>,
    /// Units per bin.
    pub sizes: Vec<usize>,
    /// Wald statistic for equal bin means, with `df = bins - 1`.
    pub wald_stat: Option<F>,
    pub df: usize,
    pub p_value: Option<f64>,
    /// Set when all effect estimates were equal and one bin was used.
    pub fallback: bool,
}

/// Contiguous folds of nearly equal size, 0-based.
fn contiguous_folds(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i * k / n).collect()
}

fn wald_equal<F: Real>(coef: &[F], cov: &Matrix<F>) -> Option<(f64, usize)> {
    let k = coef.len();
    if k < 2 {
        return None;
    }
    let q = k - 1;
    // contrasts b_j - b_0
    let d: Vec<f64> = (1..k).map(|j| (coef[j] - coef[0]).as_f64()).collect();
    let c = |a: usize, b: usize| cov[(a, b)].as_f64();
    let mut m = vec![vec![0.0; q]; q];
    for a in 0..q {
        for b in 0..q {
            m[a][b] = c(a + 1, b + 1) - c(a + 1, 0) - c(0, b + 1) + c(0, 0);
        }
    }
    let sol = solve(m, d.clone())?;
    let stat: f64 = d.iter().zip(&sol).map(|(a, b)| a * b).sum();
    stat.is_finite().then_some((stat, q))
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Quantile ranking of `tau` within `folds` contiguous folds, then a
/// no-intercept HC2 regression of `scores` on the bin dummies.
pub fn rank_from_scores<F: Real>(
    scores: &[F],
    tau: &[F],
    weights: &[F],
    num_rankings: usize,
    folds: usize,
) -> Result<RankResult<F>> {
    let n = scores.len();
    if tau.len() != n || weights.len() != n {
        return Err(Error::Dimension("scores, effects and weights differ in length".into()));
    }
    if num_rankings == 0 || folds == 0 {
        return Err(Error::Invalid("num_rankings and folds must be positive".into()));
    }
    let lo = tau.iter().copied().fold(F::infinity(), F::min);
    let hi = tau.iter().copied().fold(F::neg_infinity(), F::max);
    if !(hi > lo) || num_rankings == 1 {
        if num_rankings > 1 {
            log::warn!("effect estimates are all equal; ranking collapses to a single bin");
        }
        let (est, se) = mean_with_se(scores, weights);
        return Ok(RankResult {
            bins: vec![EstimateReport::new(Estimand::Cate("Q1".into()), "aipw_rank", est, se, n)],
            sizes: vec![n],
            wald_stat: None,
            df: 0,
            p_value: None,
            fallback: num_rankings > 1,
        });
    }
    let fold = contiguous_folds(n, folds.min(n));
    let mut bin = vec![0usize; n];
    for f in 0..folds.min(n) {
        let rows: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let t: Vec<F> = rows.iter().map(|&i| tau[i]).collect();
        for (&i, b) in rows.iter().zip(bins_by_quantile(&t, num_rankings)) {
            bin[i] = b;
        }
    }
    let mut sizes = vec![0usize; num_rankings];
    for &b in &bin {
        sizes[b] += 1;
    }
    let used: Vec<usize> = (0..num_rankings).filter(|&b| sizes[b] > 0).collect();
    let mut x = Matrix::zeros(n, used.len());
    for i in 0..n {
        let col = used.iter().position(|&b| b == bin[i]).expect("bin is used");
        x[(i, col)] = F::one();
    }
    let fit = ols_fit(&x, scores, weights, CovarianceType::HC2)?;
    let se = fit.std_errors();
    let bins = used
        .iter()
        .enumerate()
        .map(|(c, &b)| {
            EstimateReport::new(
                Estimand::Cate(format!("Q{}", b + 1)),
                "aipw_rank",
                fit.coefficients[c],
                se[c],
                sizes[b],
            )
        })
        .collect();
    let wald = wald_equal(&fit.coefficients, &fit.covariance);
    Ok(RankResult {
        bins,
        sizes: used.iter().map(|&b| sizes[b]).collect(),
        wald_stat: wald.map(|w| F::lit(w.0)),
        df: wald.map_or(0, |w| w.1),
        p_value: wald.map(|(s, df)| chi_square_sf(s, df)),
        fallback: false,
    })
}

/// Folds used by [`cf_rank_ate`].
pub const RANK_FOLDS: usize = 5;

pub fn cf_rank_ate<F: Real>(forest: &CausalForest<F>, num_rankings: usize) -> Result<RankResult<F>> {
    let scores = forest.scores()?;
    rank_from_scores(&scores, &forest.oob_tau, forest.data.weights(), num_rankings, RANK_FOLDS)
}

/// Coefficient with its standard error and test statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient<F> {
    pub estimate: F,
    pub se: F,
    pub t: F,
    /// One-sided p-value for a positive coefficient.
    pub p_one_sided: f64,
}

impl<F: Real> Coefficient<F> {
    fn from_fit(fit: &LinearFit<F>, j: usize) -> Self {
        let estimate = fit.coefficients[j];
        let se = fit.std_errors()[j];
        let t = estimate / se;
        let p = if t.is_finite() {
            1.0 - crate::stats::normal_cdf(t.as_f64())
        } else if estimate > F::zero() {
            0.0
        } else {
            1.0
        };
        Self {
            estimate,
            se,
            t,
            p_one_sided: p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration<F> {
    pub mean_forest_prediction: Coefficient<F>,
    /// `None` when the effect estimates have no spread.
    pub differential_forest_prediction: Option<Coefficient<F>>,
}

/// Regresses `scores` on `[mean(tau), tau - mean(tau)]` without intercept,
/// HC3 covariance.
pub fn calibration_from_scores<F: Real>(scores: &[F], tau: &[F], weights: &[F]) -> Result<Calibration<F>> {
    let n = scores.len();
    if tau.len() != n || weights.len() != n {
        return Err(Error::Dimension("scores, effects and weights differ in length".into()));
    }
    let tbar = weighted_mean(tau, weights);
    let centered: Vec<F> = tau.iter().map(|&t| t - tbar).collect();
    let spread = centered.iter().fold(F::zero(), |a, &c| a.max(c.abs()));
    if spread <= F::epsilon() * F::lit(16.0) * tbar.abs().max(F::one()) {
        let x = Matrix::from_columns(&[vec![tbar; n]])?;
        let fit = ols_fit(&x, scores, weights, CovarianceType::HC3)?;
        return Ok(Calibration {
            mean_forest_prediction: Coefficient::from_fit(&fit, 0),
            differential_forest_prediction: None,
        });
    }
    let x = Matrix::from_columns(&[vec![tbar; n], centered])?;
    let fit = ols_fit(&x, scores, weights, CovarianceType::HC3)?;
    Ok(Calibration {
        mean_forest_prediction: Coefficient::from_fit(&fit, 0),
        differential_forest_prediction: Some(Coefficient::from_fit(&fit, 1)),
    })
}

pub fn cf_test_calibration<F: Real>(forest: &CausalForest<F>) -> Result<Calibration<F>> {
    let scores = forest.scores()?;
    calibration_from_scores(&scores, &forest.oob_tau, forest.data.weights())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlpRow<F> {
    pub name: String,
    pub estimate: F,
    pub se: F,
    pub t: F,
    /// Two-sided.
    pub p_value: f64,
}

impl<F: Real> BlpRow<F> {
    pub fn ci(&self) -> (F, F) {
        let h = F::lit(crate::estimators::Z95) * self.se;
        (self.estimate - h, self.estimate + h)
    }
}

/// OLS of `scores` on `[1, a]` with HC3 covariance.
pub fn blp_from_scores<F: Real>(
    scores: &[F],
    weights: &[F],
    a: &Matrix<F>,
    names: &[String],
) -> Result<Vec<BlpRow<F>>> {
    let n = scores.len();
    if a.nrows() != n || weights.len() != n {
        return Err(Error::Dimension("projection covariates do not match the scores".into()));
    }
    if names.len() != a.ncols() {
        return Err(Error::Dimension("one name per projection covariate".into()));
    }
    let design = a.with_intercept();
    let mut all_names = vec!["(Intercept)".to_string()];
    all_names.extend(names.iter().cloned());
    let fit = crate::linear_models::ols_fit_named(&design, &all_names, scores, weights, CovarianceType::HC3)?;
    let se = fit.std_errors();
    Ok(all_names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let t = fit.coefficients[j] / se[j];
            BlpRow {
                name,
                estimate: fit.coefficients[j],
                se: se[j],
                t,
                p_value: two_sided_p(t.as_f64()),
            }
        })
        .collect())
}

pub fn cf_best_linear_projection<F: Real>(
    forest: &CausalForest<F>,
    a: &Matrix<F>,
    names: &[String],
) -> Result<Vec<BlpRow<F>>> {
    let scores = forest.scores()?;
    blp_from_scores(&scores, forest.data.weights(), a, names)
}

/// Indices of features whose importance exceeds the mean importance.
pub fn select_above_mean<F: Real>(importance: &[F]) -> Vec<usize> {
    if importance.is_empty() {
        return Vec::new();
    }
    let m = importance.iter().copied().sum::<F>() / F::from_count(importance.len());
    (0..importance.len()).filter(|&j| importance[j] > m).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contiguous_folds_are_balanced() {
        let f = contiguous_folds(12, 5);
        assert_eq!(f, vec![0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn quantile_bins_split_evenly() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        let b = bins_by_quantile(&v, 5);
        for k in 0..5 {
            assert_eq!(b.iter().filter(|&&x| x == k).count(), 20);
        }
    }

    #[test]
    fn solve_small_system() {
        let x = solve(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
        assert!(solve(vec![vec![1.0, 2.0], vec![2.0, 4.0]], vec![1.0, 1.0]).is_none());
    }

    #[test]
    fn calibration_of_exact_scores() {
        let tau: Vec<f64> = (0..50).map(|i| f64::from(i) / 10.0).collect();
        let c = calibration_from_scores(&tau, &tau, &[1.0; 50]).unwrap();
        assert!((c.mean_forest_prediction.estimate - 1.0).abs() < 1e-12);
        assert!(c.mean_forest_prediction.se.abs() < 1e-10);
        let d = c.differential_forest_prediction.unwrap();
        assert!((d.estimate - 1.0).abs() < 1e-12);
        assert!(d.se.abs() < 1e-10);
        let flat = calibration_from_scores(&tau, &[0.3; 50], &[1.0; 50]).unwrap();
        assert!(flat.differential_forest_prediction.is_none());
    }

    #[test]
    fn above_mean_selection() {
        assert_eq!(select_above_mean(&[0.5, 0.1, 0.3, 0.1]), vec![0, 2]);
        assert!(select_above_mean(&[0.0f64; 3]).is_empty());
    }
}
