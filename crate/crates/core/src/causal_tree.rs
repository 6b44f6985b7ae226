//! Single honest causal tree: greedy partitioning that maximizes effect
//! heterogeneity on one half of the data, cross-validated depth, pruning on
//! held-out gain, and leaf effects re-estimated on the other half.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimators::fold_assignment;
use crate::matrix::Matrix;
use crate::rng::{derive_seed, stream};
use crate::scalar::Real;
use crate::stats::mean_with_se;
use crate::tree::{grow, GrowConfig, SideLimits, SplitRule, Tree, MAX_THRESHOLDS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalTreeParams {
    pub min_treated: usize,
    pub min_control: usize,
    pub max_depth: Option<usize>,
    pub cv_folds: usize,
}

impl Default for CausalTreeParams {
    fn default() -> Self {
        Self {
            min_treated: 10,
            min_control: 10,
            max_depth: None,
            cv_folds: 5,
        }
    }
}

/// Honest statistics of one node, computed on its estimation rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafStats<F> {
    /// Weighted treated mean minus weighted control mean; NaN if an arm is
    /// empty.
    pub tau: F,
    pub n_treated: usize,
    pub n_control: usize,
    /// Sampling variance of `tau`.
    pub variance: F,
}

/// Cross-validation record of a fitted tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvScoreTable<F> {
    /// Held-out criterion summed over folds, indexed by depth.
    pub depth_scores: Vec<F>,
    /// Held-out gain of each node's split summed over folds (zero at
    /// leaves), indexed like `tree.nodes`.
    pub node_gains: Vec<F>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalTree<F> {
    pub tree: Tree<F>,
    /// Indexed like `tree.nodes`.
    pub stats: Vec<LeafStats<F>>,
    pub feature_names: Vec<String>,
    pub split_sample_ids: Vec<usize>,
    pub est_sample_ids: Vec<usize>,
    /// Fold (1-based) of each split-sample row, aligned with
    /// `split_sample_ids`.
    pub cv_fold: Vec<usize>,
    pub params: CausalTreeParams,
    pub selected_depth: usize,
    pub cv: Option<CvScoreTable<F>>,
}

struct ArmDiff<'a, F> {
    y: &'a [F],
    w: &'a [bool],
    s: &'a [F],
}

impl<F: Real> SplitRule<F> for ArmDiff<'_, F> {
    // treated weight, treated weighted sum, control weight, control weighted sum
    type Acc = [F; 4];

    fn zero(&self) -> [F; 4] {
        [F::zero(); 4]
    }

    fn add(&self, acc: &mut [F; 4], r: usize) {
        let k = if self.w[r] { 0 } else { 2 };
        acc[k] = acc[k] + self.s[r];
        acc[k + 1] = acc[k + 1] + self.s[r] * self.y[r];
    }

    fn merge(&self, acc: &mut [F; 4], other: &[F; 4]) {
        for (a, b) in acc.iter_mut().zip(other) {
            *a = *a + *b;
        }
    }

    fn score(&self, a: &[F; 4]) -> Option<F> {
        if a[0] <= F::zero() || a[2] <= F::zero() {
            return None;
        }
        let tau = a[1] / a[0] - a[3] / a[2];
        Some((a[0] + a[2]) * tau * tau)
    }
}

impl<F: Real> ArmDiff<'_, F> {
    /// `(tau, total weight)` over `rows`, if both arms are present.
    fn effect(&self, rows: &[usize]) -> Option<(F, F)> {
        let mut acc = self.zero();
        for &r in rows {
            self.add(&mut acc, r);
        }
        if acc[0] <= F::zero() || acc[2] <= F::zero() {
            return None;
        }
        Some((acc[1] / acc[0] - acc[3] / acc[2], acc[0] + acc[2]))
    }
}

fn node_stats<F: Real>(rows: &[usize], y: &[F], w: &[bool], s: &[F]) -> LeafStats<F> {
    let (mut y1, mut s1, mut y0, mut s0) = (vec![], vec![], vec![], vec![]);
    for &r in rows {
        if w[r] {
            y1.push(y[r]);
            s1.push(s[r]);
        } else {
            y0.push(y[r]);
            s0.push(s[r]);
        }
    }
    if y1.is_empty() || y0.is_empty() {
        return LeafStats {
            tau: F::nan(),
            n_treated: y1.len(),
            n_control: y0.len(),
            variance: F::nan(),
        };
    }
    let (m1, se1) = mean_with_se(&y1, &s1);
    let (m0, se0) = mean_with_se(&y0, &s0);
    LeafStats {
        tau: m1 - m0,
        n_treated: y1.len(),
        n_control: y0.len(),
        variance: se1 * se1 + se0 * se0,
    }
}

fn grow_config(params: &CausalTreeParams, p: usize) -> GrowConfig {
    let limits = SideLimits {
        min_total: params.min_treated + params.min_control,
        min_treated: params.min_treated,
        min_control: params.min_control,
    };
    GrowConfig {
        split_limits: limits,
        est_limits: limits,
        mtry: p,
        max_depth: params.max_depth,
        max_thresholds: MAX_THRESHOLDS,
    }
}

/// Node holding `x` when the tree is read only down to `depth`.
fn node_at_depth<F: Real>(tree: &Tree<F>, x: &[F], depth: usize) -> usize {
    let mut k = 0;
    while let Some(s) = &tree.nodes[k].split {
        if tree.nodes[k].depth >= depth {
            break;
        }
        k = if x[s.feature] <= s.threshold { s.left } else { s.right };
    }
    k
}

/// Held-out criterion `sum n_te (2 tau_te tau_tr - tau_tr^2)` of the partition
/// of `train_tree` cut at `depth`. Held-out groups lacking an arm are merged
/// into their parent's group.
fn heldout_score<F: Real>(
    train_tree: &Tree<F>,
    depth: usize,
    test: &[usize],
    x: &Matrix<F>,
    rule: &ArmDiff<'_, F>,
) -> F {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &r in test {
        groups.entry(node_at_depth(train_tree, x.row(r), depth)).or_default().push(r);
    }
    let mut total = F::zero();
    for d in (0..=depth).rev() {
        let at_d: Vec<usize> = groups
            .keys()
            .copied()
            .filter(|&k| train_tree.nodes[k].depth == d)
            .collect();
        for k in at_d {
            let rows = groups.remove(&k).unwrap_or_default();
            let tr = rule.effect(train_tree.est_rows_of(k));
            let te = rule.effect(&rows);
            match (tr, te) {
                (Some((t_tr, _)), Some((t_te, n_te))) => {
                    total = total + n_te * (F::lit(2.0) * t_te * t_tr - t_tr * t_tr);
                }
                _ => {
                    if let Some(p) = train_tree.nodes[k].parent {
                        groups.entry(p).or_default().extend(rows);
                    }
                }
            }
        }
    }
    total
}

/// Smallest depth whose summed held-out score is within one standard error
/// of the best, the error taken over fold-wise differences from the best.
fn one_se_depth<F: Real>(per_fold: &[Vec<F>], totals: &[F]) -> usize {
    let mut best = 0;
    for (d, &q) in totals.iter().enumerate() {
        if q > totals[best] {
            best = d;
        }
    }
    let k = per_fold[best].len();
    for d in 0..best {
        let diffs: Vec<F> = per_fold[d].iter().zip(&per_fold[best]).map(|(&a, &b)| b - a).collect();
        let m = diffs.iter().copied().sum::<F>() / F::from_count(k);
        let ss = diffs.iter().fold(F::zero(), |a, &v| a + (v - m) * (v - m));
        let se = (ss / F::from_count(k - 1)).sqrt() * F::from_count(k).sqrt();
        if totals[best] - totals[d] <= se {
            return d;
        }
    }
    best
}

fn fold_rows(ids: &[usize], folds: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&r, &f) in ids.iter().zip(folds) {
        if f == k {
            test.push(r);
        } else {
            train.push(r);
        }
    }
    (train, test)
}

pub fn ct_fit<F: Real>(ds: &Dataset<F>, params: &CausalTreeParams, seed: u64) -> Result<CausalTree<F>> {
    ds.require_complete()?;
    ds.require_both_arms()?;
    if params.cv_folds < 2 {
        return Err(Error::Invalid("cv_folds must be at least 2".into()));
    }
    let n = ds.n();
    let x = ds.covariates();
    let rule = ArmDiff {
        y: ds.outcome(),
        w: ds.treatment(),
        s: ds.weights(),
    };

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, "ct-honesty", 0));
    let mut est_ids = perm.split_off(n / 2);
    let mut split_ids = perm;
    split_ids.sort_unstable();
    est_ids.sort_unstable();
    for (name, rows) in [("split", &split_ids), ("estimation", &est_ids)] {
        if rule.effect(rows).is_none() {
            return Err(Error::Infeasible(format!("{name} sample lacks a treatment arm")));
        }
    }

    let cfg = grow_config(params, x.ncols());
    let mut grow_rng = stream(seed, "ct-grow", 0);
    let mut full_rule = ArmDiff { ..rule };
    let full = grow(
        x,
        Some(ds.treatment()),
        split_ids.clone(),
        est_ids.clone(),
        &mut full_rule,
        &cfg,
        &mut grow_rng,
    );

    let cv_fold = fold_assignment(split_ids.len(), params.cv_folds, derive_seed(seed, "ct-cv", 0));
    let mut fold_trees = Vec::with_capacity(params.cv_folds);
    for k in 1..=params.cv_folds {
        let (train, test) = fold_rows(&split_ids, &cv_fold, k);
        let mut r = ArmDiff { ..rule };
        let t = grow(
            x,
            Some(ds.treatment()),
            train.clone(),
            train,
            &mut r,
            &cfg,
            &mut stream(seed, "ct-cv-grow", k as u64),
        );
        fold_trees.push((t, test));
    }
    let max_depth = fold_trees.iter().map(|(t, _)| t.depth()).max().unwrap_or(0).max(full.depth());
    // per_fold[d][k]
    let per_fold: Vec<Vec<F>> = (0..=max_depth)
        .map(|d| fold_trees.iter().map(|(t, test)| heldout_score(t, d, test, x, &rule)).collect())
        .collect();
    let depth_scores: Vec<F> = per_fold.iter().map(|q| q.iter().copied().sum()).collect();
    let selected_depth = one_se_depth(&per_fold, &depth_scores);
    let tree = full.cut_at_depth(selected_depth);
    let mut out = CausalTree {
        stats: Vec::new(),
        tree,
        feature_names: ds.column_names().to_vec(),
        split_sample_ids: split_ids,
        est_sample_ids: est_ids,
        cv_fold,
        params: params.clone(),
        selected_depth,
        cv: None,
    };
    out.refresh_stats(ds);
    let mut table = ct_cv_table(&out, ds)?;
    table.depth_scores = depth_scores;
    Ok(ct_prune(&out, &table, ds))
}

impl<F: Real> CausalTree<F> {
    fn refresh_stats(&mut self, ds: &Dataset<F>) {
        let (y, w, s) = (ds.outcome(), ds.treatment(), ds.weights());
        self.stats = (0..self.tree.nodes.len())
            .map(|k| node_stats(self.tree.est_rows_of(k), y, w, s))
            .collect();
    }

    /// Splits leaf `node` by hand and refreshes the honest statistics. The
    /// stored CV record no longer matches the tree afterwards.
    pub fn split_leaf(&mut self, ds: &Dataset<F>, node: usize, feature: usize, threshold: F) -> (usize, usize) {
        let children = self.tree.force_split(ds.covariates(), node, feature, threshold);
        self.refresh_stats(ds);
        self.cv = None;
        children
    }

    pub fn predict_row(&self, x: &[F]) -> F {
        self.stats[self.tree.leaf_of(x)].tau
    }

    /// Flat node list for reports.
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<serde_json::Value> = self
            .tree
            .nodes
            .iter()
            .zip(&self.stats)
            .enumerate()
            .map(|(id, (node, st))| {
                let mut v = serde_json::json!({
                    "id": id,
                    "depth": node.depth,
                    "tau": finite_or_null(st.tau),
                    "n_treated": st.n_treated,
                    "n_control": st.n_control,
                    "variance": finite_or_null(st.variance),
                });
                if let Some(s) = &node.split {
                    v["feature"] = serde_json::json!(self.feature_names[s.feature]);
                    v["threshold"] = serde_json::json!(s.threshold.as_f64());
                    v["left"] = serde_json::json!(s.left);
                    v["right"] = serde_json::json!(s.right);
                }
                v
            })
            .collect();
        serde_json::json!({
            "selected_depth": self.selected_depth,
            "num_leaves": self.tree.num_leaves(),
            "min_treated": self.params.min_treated,
            "min_control": self.params.min_control,
            "nodes": nodes,
        })
    }
}

fn finite_or_null<F: Real>(v: F) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v.as_f64())
    } else {
        serde_json::Value::Null
    }
}

/// Cross-fitted held-out gain of every split in `tree`, using the folds
/// stored with it on the split sample.
pub fn ct_cv_table<F: Real>(tree: &CausalTree<F>, ds: &Dataset<F>) -> Result<CvScoreTable<F>> {
    let x = ds.covariates();
    if x.ncols() != tree.feature_names.len() {
        return Err(Error::Dimension("dataset does not match the tree".into()));
    }
    let rule = ArmDiff {
        y: ds.outcome(),
        w: ds.treatment(),
        s: ds.weights(),
    };
    let t = &tree.tree;
    let node_of = |r: usize, k: usize| -> usize {
        let s = t.nodes[k].split.as_ref().expect("internal node");
        if x[(r, s.feature)] <= s.threshold {
            s.left
        } else {
            s.right
        }
    };
    let q = |tr: Option<(F, F)>, te: Option<(F, F)>| -> Option<(F, F)> {
        let (t_tr, _) = tr?;
        let (t_te, n_te) = te?;
        Some((n_te * (F::lit(2.0) * t_te * t_tr - t_tr * t_tr), n_te * t_tr * t_tr))
    };
    let mut node_gains = vec![F::zero(); t.nodes.len()];
    for (k, node) in t.nodes.iter().enumerate() {
        if node.is_leaf() {
            continue;
        }
        let members: Vec<usize> = t.split_rows_of(k).to_vec();
        let in_node: std::collections::HashSet<usize> = members.iter().copied().collect();
        let (mut gain, mut scale) = (F::zero(), F::zero());
        for fold in 1..=tree.params.cv_folds {
            let (train, test): (Vec<usize>, Vec<usize>) = {
                let (a, b) = fold_rows(&tree.split_sample_ids, &tree.cv_fold, fold);
                (
                    a.into_iter().filter(|r| in_node.contains(r)).collect(),
                    b.into_iter().filter(|r| in_node.contains(r)).collect(),
                )
            };
            let Some((parent, ps)) = q(rule.effect(&train), rule.effect(&test)) else {
                continue;
            };
            let side = |rows: &[usize], left: bool| -> Vec<usize> {
                let target = if left {
                    node.split.as_ref().map(|s| s.left)
                } else {
                    node.split.as_ref().map(|s| s.right)
                };
                rows.iter().copied().filter(|&r| Some(node_of(r, k)) == target).collect()
            };
            let mut children = F::zero();
            let mut ok = true;
            for left in [true, false] {
                match q(rule.effect(&side(&train, left)), rule.effect(&side(&test, left))) {
                    Some((c, cs)) => {
                        children = children + c;
                        scale = scale + cs;
                    }
                    None => ok = false,
                }
            }
            if ok {
                gain = gain + children - parent;
                scale = scale + ps;
            }
        }
        node_gains[k] = if gain.abs() <= F::lit(1e-10) * scale { F::zero() } else { gain };
    }
    Ok(CvScoreTable {
        depth_scores: tree.cv.as_ref().map(|c| c.depth_scores.clone()).unwrap_or_default(),
        node_gains,
    })
}

/// Removes every subtree whose best achievable held-out gain is not
/// positive. The result is a subtree of the input.
pub fn ct_prune<F: Real>(tree: &CausalTree<F>, table: &CvScoreTable<F>, ds: &Dataset<F>) -> CausalTree<F> {
    let t = &tree.tree;
    let mut best = vec![F::zero(); t.nodes.len()];
    let mut collapse = vec![false; t.nodes.len()];
    // children always have larger indices than their parent
    for k in (0..t.nodes.len()).rev() {
        if let Some(s) = &t.nodes[k].split {
            let total = table.node_gains[k] + best[s.left] + best[s.right];
            if total > F::zero() {
                best[k] = total;
            } else {
                collapse[k] = true;
            }
        }
    }
    let mut out = tree.clone();
    out.tree = t.collapsed(&collapse);
    out.refresh_stats(ds);
    let kept: Vec<usize> = keep_map(t, &collapse);
    out.cv = Some(CvScoreTable {
        depth_scores: table.depth_scores.clone(),
        node_gains: kept
            .iter()
            .map(|&old| if collapse[old] { F::zero() } else { table.node_gains[old] })
            .collect(),
    });
    out
}

/// Old index of every node surviving `collapsed`, in the new preorder.
fn keep_map<F>(t: &Tree<F>, collapse: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![0];
    while let Some(k) = stack.pop() {
        out.push(k);
        if let Some(s) = &t.nodes[k].split {
            if !collapse[k] {
                stack.push(s.right);
                stack.push(s.left);
            }
        }
    }
    out
}

pub fn ct_predict<F: Real>(tree: &CausalTree<F>, x: &Matrix<F>) -> Result<Vec<F>> {
    if x.ncols() != tree.feature_names.len() {
        return Err(Error::Dimension(format!(
            "tree has {} features, query has {}",
            tree.feature_names.len(),
            x.ncols()
        )));
    }
    Ok(x.rows_iter().map(|r| tree.predict_row(r)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen, Preset};

    #[test]
    fn depth_zero_tree_is_left_alone_by_pruning() {
        let (ds, _) = gen::<f64>(&Preset::RandomizedConstant.dgp(400, 3)).unwrap();
        let params = CausalTreeParams {
            max_depth: Some(0),
            ..Default::default()
        };
        let t = ct_fit(&ds, &params, 1).unwrap();
        assert_eq!(t.tree.nodes.len(), 1);
        let table = ct_cv_table(&t, &ds).unwrap();
        let p = ct_prune(&t, &table, &ds);
        assert_eq!(p.tree, t.tree);
    }

    #[test]
    fn keep_map_matches_collapse_order() {
        let (ds, _) = gen::<f64>(&Preset::StepEffect.dgp(400, 3)).unwrap();
        let mut t = ct_fit(&ds, &CausalTreeParams::default(), 1).unwrap();
        let leaf = t.tree.leaves().next().unwrap();
        t.split_leaf(&ds, leaf, 1, 0.0);
        let none = vec![false; t.tree.nodes.len()];
        assert_eq!(keep_map(&t.tree, &none).len(), t.tree.collapsed(&none).nodes.len());
    }
}
