//! Honest binary tree engine shared by the regression forest, the causal tree
//! and the causal forest.
//!
//! A tree is grown on a *split* sample and carries a disjoint (or, for
//! adaptive trees, identical) *estimation* sample along with it. Both row
//! sets are partitioned in place, so every node owns a contiguous slice of
//! each and consumers can compute node statistics at any depth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::scalar::Real;

/// Default cap on candidate thresholds per feature and node.
pub const MAX_THRESHOLDS: usize = 256;

/// Accumulates sufficient statistics of a candidate child and scores it.
///
/// The engine maximizes `score(left) + score(right) - score(parent)`.
pub trait SplitRule<F: Real> {
    type Acc: Copy;

    fn zero(&self) -> Self::Acc;

    /// Called once per node with its split-sample rows before any
    /// accumulation, for rules whose per-row values depend on the node.
    fn prepare(&mut self, _rows: &[usize]) {}

    fn add(&self, acc: &mut Self::Acc, row: usize);

    /// Adds the rows accumulated in `other` to `acc`.
    fn merge(&self, acc: &mut Self::Acc, other: &Self::Acc);

    /// `None` when the child cannot be scored (e.g. an arm is empty).
    fn score(&self, acc: &Self::Acc) -> Option<F>;
}

/// Minimum counts every child must keep on one of the two samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideLimits {
    pub min_total: usize,
    pub min_treated: usize,
    pub min_control: usize,
}

impl SideLimits {
    pub fn total(min_total: usize) -> Self {
        Self {
            min_total,
            min_treated: 0,
            min_control: 0,
        }
    }

    #[inline]
    fn admits(&self, c: Counts) -> bool {
        c.total >= self.min_total && c.treated >= self.min_treated && c.total - c.treated >= self.min_control
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowConfig {
    pub split_limits: SideLimits,
    pub est_limits: SideLimits,
    /// Features tried per node; values `>= p` try all of them.
    pub mtry: usize,
    pub max_depth: Option<usize>,
    pub max_thresholds: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    total: usize,
    treated: usize,
}

impl Counts {
    #[inline]
    fn push(&mut self, treated: bool) {
        self.total += 1;
        self.treated += usize::from(treated);
    }

    fn plus(self, other: Counts) -> Counts {
        Counts {
            total: self.total + other.total,
            treated: self.treated + other.treated,
        }
    }

    fn minus(self, other: Counts) -> Counts {
        Counts {
            total: self.total - other.total,
            treated: self.treated - other.treated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split<F> {
    pub feature: usize,
    /// Rows with `x[feature] <= threshold` go left.
    pub threshold: F,
    pub gain: F,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node<F> {
    pub depth: usize,
    pub parent: Option<usize>,
    pub split: Option<Split<F>>,
    /// Half-open range into [`Tree::split_rows`].
    pub split_range: (usize, usize),
    /// Half-open range into [`Tree::est_rows`].
    pub est_range: (usize, usize),
}

impl<F> Node<F> {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree<F> {
    pub nodes: Vec<Node<F>>,
    pub split_rows: Vec<usize>,
    pub est_rows: Vec<usize>,
}

impl<F: Real> Tree<F> {
    /// A single leaf holding all rows.
    pub fn stump(split_rows: Vec<usize>, est_rows: Vec<usize>) -> Self {
        let node = Node {
            depth: 0,
            parent: None,
            split: None,
            split_range: (0, split_rows.len()),
            est_range: (0, est_rows.len()),
        };
        Self {
            nodes: vec![node],
            split_rows,
            est_rows,
        }
    }

    pub fn leaf_of(&self, x: &[F]) -> usize {
        let mut k = 0;
        while let Some(s) = &self.nodes[k].split {
            k = if x[s.feature] <= s.threshold { s.left } else { s.right };
        }
        k
    }

    pub fn split_rows_of(&self, node: usize) -> &[usize] {
        let (a, b) = self.nodes[node].split_range;
        &self.split_rows[a..b]
    }

    pub fn est_rows_of(&self, node: usize) -> &[usize] {
        let (a, b) = self.nodes[node].est_range;
        &self.est_rows[a..b]
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&k| self.nodes[k].is_leaf())
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves().count()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Copy in which every node flagged in `collapse` becomes a leaf; its
    /// descendants are dropped and the arena renumbered in preorder.
    pub fn collapsed(&self, collapse: &[bool]) -> Self {
        let mut nodes: Vec<Node<F>> = Vec::with_capacity(self.nodes.len());
        // (old index, new parent, slot in parent to patch)
        let mut stack: Vec<(usize, Option<usize>, bool)> = vec![(0, None, false)];
        while let Some((old, parent, is_right)) = stack.pop() {
            let new = nodes.len();
            let mut node = self.nodes[old].clone();
            node.parent = parent;
            if let Some(p) = parent {
                let s: &mut Split<F> = nodes[p].split.as_mut().expect("parent is split");
                if is_right {
                    s.right = new;
                } else {
                    s.left = new;
                }
            }
            let children = match node.split {
                Some(s) if !collapse[old] => Some((s.left, s.right)),
                _ => {
                    node.split = None;
                    None
                }
            };
            nodes.push(node);
            if let Some((l, r)) = children {
                stack.push((r, Some(new), true));
                stack.push((l, Some(new), false));
            }
        }
        Self {
            nodes,
            split_rows: self.split_rows.clone(),
            est_rows: self.est_rows.clone(),
        }
    }

    /// Copy with every node at `depth` turned into a leaf.
    pub fn cut_at_depth(&self, depth: usize) -> Self {
        let flags: Vec<bool> = self.nodes.iter().map(|n| n.depth >= depth).collect();
        self.collapsed(&flags)
    }

    /// Splits leaf `node` at `(feature, threshold)` regardless of any
    /// constraint. Returns the two new child indices.
    pub fn force_split(&mut self, x: &Matrix<F>, node: usize, feature: usize, threshold: F) -> (usize, usize) {
        assert!(self.nodes[node].is_leaf(), "node {node} is already split");
        let goes_left = |r: &usize| x[(*r, feature)] <= threshold;
        let (sa, sb) = self.nodes[node].split_range;
        let (ea, eb) = self.nodes[node].est_range;
        let sm = stable_partition(&mut self.split_rows[sa..sb], goes_left);
        let em = stable_partition(&mut self.est_rows[ea..eb], goes_left);
        let depth = self.nodes[node].depth + 1;
        let left = self.nodes.len();
        let right = left + 1;
        for (s, e) in [((sa, sa + sm), (ea, ea + em)), ((sa + sm, sb), (ea + em, eb))] {
            self.nodes.push(Node {
                depth,
                parent: Some(node),
                split: None,
                split_range: s,
                est_range: e,
            });
        }
        self.nodes[node].split = Some(Split {
            feature,
            threshold,
            gain: F::zero(),
            left,
            right,
        });
        (left, right)
    }
}

/// Moves rows satisfying `pred` to the front, keeping relative order on both
/// sides. Returns the size of the front block.
fn stable_partition(rows: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = rows.iter().partition(|r| pred(r));
    let k = yes.len();
    rows[..k].copy_from_slice(&yes);
    rows[k..].copy_from_slice(&no);
    k
}

struct Candidate<F> {
    feature: usize,
    threshold: F,
    gain: F,
}

/// Rows of one sample sorted by each sorted-kind feature (ties by row
/// index), with the values alongside. Every node owns the same contiguous
/// range in all of them, matching its range in the tree's row array.
struct Presorted<F> {
    cols: Vec<Option<(Vec<usize>, Vec<F>)>>,
}

impl<F: Real> Presorted<F> {
    /// Restricts the full-sample `order` to the rows whose `tags` carry `bit`.
    fn from_order(x: &Matrix<F>, order: &FeatureOrder<F>, tags: &[u8], bit: u8, len: usize) -> Self {
        let cols = order
            .kinds
            .iter()
            .enumerate()
            .map(|(f, kind)| match kind {
                FeatureKind::Sorted(all) => {
                    let mut rows = Vec::with_capacity(len);
                    let mut vals = Vec::with_capacity(len);
                    for &r in all {
                        if tags[r] & bit != 0 {
                            rows.push(r);
                            vals.push(x[(r, f)]);
                        }
                    }
                    Some((rows, vals))
                }
                FeatureKind::Levels { .. } => None,
            })
            .collect();
        Self { cols }
    }

    fn col(&self, f: usize, (a, b): (usize, usize)) -> (&[usize], &[F]) {
        let (rows, vals) = self.cols[f].as_ref().expect("feature is presorted");
        (&rows[a..b], &vals[a..b])
    }

    /// Stable partition of `range` in every column by `left[row]`.
    fn partition(&mut self, (a, b): (usize, usize), left: &[bool], buf: &mut Vec<(usize, F)>) {
        for (rows, vals) in self.cols.iter_mut().flatten() {
            let (rows, vals) = (&mut rows[a..b], &mut vals[a..b]);
            buf.clear();
            let mut k = 0;
            for i in 0..rows.len() {
                let (r, v) = (rows[i], vals[i]);
                if left[r] {
                    rows[k] = r;
                    vals[k] = v;
                    k += 1;
                } else {
                    buf.push((r, v));
                }
            }
            for ((r, v), &(br, bv)) in rows[k..].iter_mut().zip(&mut vals[k..]).zip(buf.iter()) {
                *r = br;
                *v = bv;
            }
        }
    }
}

/// Features with at most this many distinct values are searched by
/// bucketing a node's rows per value instead of through sorted columns.
pub const MAX_LEVELS: usize = 64;

enum FeatureKind<F> {
    /// All rows sorted by value, ties by row index.
    Sorted(Vec<usize>),
    /// Distinct values in ascending order and the level of every row.
    Levels { values: Vec<F>, level: Vec<u16> },
}

/// Per-feature search structure of a covariate matrix, computed once and
/// shared by every tree grown on it.
pub struct FeatureOrder<F> {
    kinds: Vec<FeatureKind<F>>,
}

impl<F: Real> FeatureOrder<F> {
    pub fn new(x: &Matrix<F>) -> Self {
        let kinds = (0..x.ncols())
            .map(|f| {
                let mut r: Vec<usize> = (0..x.nrows()).collect();
                r.sort_by(|&a, &b| {
                    x[(a, f)]
                        .partial_cmp(&x[(b, f)])
                        .expect("forest covariates must be finite")
                        .then(a.cmp(&b))
                });
                let mut values: Vec<F> = Vec::new();
                let mut level = vec![0u16; x.nrows()];
                for &i in &r {
                    let v = x[(i, f)];
                    if values.last().is_none_or(|&last| last < v) {
                        if values.len() == MAX_LEVELS {
                            return FeatureKind::Sorted(r);
                        }
                        values.push(v);
                    }
                    level[i] = (values.len() - 1) as u16;
                }
                FeatureKind::Levels { values, level }
            })
            .collect();
        Self { kinds }
    }

    #[cfg(test)]
    fn all_sorted(x: &Matrix<F>) -> Self {
        let kinds = Self::new(x)
            .kinds
            .into_iter()
            .map(|k| match k {
                FeatureKind::Sorted(r) => FeatureKind::Sorted(r),
                FeatureKind::Levels { level, .. } => {
                    let mut r: Vec<usize> = (0..level.len()).collect();
                    r.sort_by_key(|&i| (level[i], i));
                    FeatureKind::Sorted(r)
                }
            })
            .collect();
        Self { kinds }
    }
}

struct Scratch<A> {
    suffix: Vec<A>,
    acc: Vec<A>,
    split: Vec<Counts>,
    est: Vec<Counts>,
    present: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn best_for_feature<F: Real, R: SplitRule<F>>(
    treated: Option<&[bool]>,
    (rows, vals): (&[usize], &[F]),
    (est_rows, est_vals): (&[usize], &[F]),
    f: usize,
    rule: &R,
    cfg: &GrowConfig,
    (parent_score, split_all, est_all): (F, Counts, Counts),
    scratch: &mut Scratch<R::Acc>,
    best: &mut Option<Candidate<F>>,
) {
    let is_t = |r: usize| treated.is_some_and(|t| t[r]);
    let m = rows.len();
    let gaps = vals.windows(2).filter(|w| w[0] < w[1]).count();
    if gaps == 0 {
        return;
    }
    let suffix = &mut scratch.suffix;
    suffix.clear();
    suffix.resize(m + 1, rule.zero());
    for k in (0..m).rev() {
        let mut acc = suffix[k + 1];
        rule.add(&mut acc, rows[k]);
        suffix[k] = acc;
    }
    let cap = cfg.max_thresholds.max(1);
    let mut left = rule.zero();
    let mut split_left = Counts::default();
    let mut est_left = Counts::default();
    let mut est_pos = 0;
    let mut gap = 0;
    for k in 0..m - 1 {
        let r = rows[k];
        rule.add(&mut left, r);
        split_left.push(is_t(r));
        let (a, b) = (vals[k], vals[k + 1]);
        if a >= b {
            continue;
        }
        let g = gap;
        gap += 1;
        if gaps > cap && (g + 1) * cap / gaps == g * cap / gaps {
            continue;
        }
        if !cfg.split_limits.admits(split_left) || !cfg.split_limits.admits(split_all.minus(split_left)) {
            continue;
        }
        let mut threshold = a + (b - a) / F::lit(2.0);
        if threshold >= b {
            threshold = a;
        }
        while est_pos < est_rows.len() && est_vals[est_pos] <= threshold {
            est_left.push(is_t(est_rows[est_pos]));
            est_pos += 1;
        }
        if !cfg.est_limits.admits(est_left) || !cfg.est_limits.admits(est_all.minus(est_left)) {
            continue;
        }
        let (Some(sl), Some(sr)) = (rule.score(&left), rule.score(&suffix[k + 1])) else {
            continue;
        };
        let gain = sl + sr - parent_score;
        let scale = sl.abs().max(sr.abs()).max(parent_score.abs());
        if !(gain > F::lit(1e-10) * scale) || !gain.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|c| gain > c.gain) {
            *best = Some(Candidate {
                feature: f,
                threshold,
                gain,
            });
        }
    }
}

/// Split search on a low-cardinality feature: the node's rows are bucketed
/// by level and thresholds lie between consecutive levels present in the
/// split sample, as in [`best_for_feature`].
#[allow(clippy::too_many_arguments)]
fn best_for_levels<F: Real, R: SplitRule<F>>(
    treated: Option<&[bool]>,
    rows: &[usize],
    est_rows: &[usize],
    (values, level): (&[F], &[u16]),
    f: usize,
    rule: &R,
    cfg: &GrowConfig,
    (parent_score, split_all, est_all): (F, Counts, Counts),
    scratch: &mut Scratch<R::Acc>,
    best: &mut Option<Candidate<F>>,
) {
    let is_t = |r: usize| treated.is_some_and(|t| t[r]);
    let k = values.len();
    let Scratch {
        suffix,
        acc,
        split,
        est,
        present,
    } = scratch;
    acc.clear();
    acc.resize(k, rule.zero());
    split.clear();
    split.resize(k, Counts::default());
    est.clear();
    est.resize(k, Counts::default());
    for &r in rows {
        let l = level[r] as usize;
        rule.add(&mut acc[l], r);
        split[l].push(is_t(r));
    }
    for &r in est_rows {
        est[level[r] as usize].push(is_t(r));
    }
    present.clear();
    present.extend((0..k).filter(|&l| split[l].total > 0));
    let m = present.len();
    if m < 2 {
        return;
    }
    suffix.clear();
    suffix.resize(m + 1, rule.zero());
    for i in (0..m).rev() {
        let mut a = suffix[i + 1];
        rule.merge(&mut a, &acc[present[i]]);
        suffix[i] = a;
    }
    let gaps = m - 1;
    let cap = cfg.max_thresholds.max(1);
    let mut left = rule.zero();
    let mut split_left = Counts::default();
    let mut est_left = Counts::default();
    let mut est_level = 0;
    for g in 0..gaps {
        let l = present[g];
        rule.merge(&mut left, &acc[l]);
        split_left = split_left.plus(split[l]);
        if gaps > cap && (g + 1) * cap / gaps == g * cap / gaps {
            continue;
        }
        if !cfg.split_limits.admits(split_left) || !cfg.split_limits.admits(split_all.minus(split_left)) {
            continue;
        }
        let (a, b) = (values[l], values[present[g + 1]]);
        let mut threshold = a + (b - a) / F::lit(2.0);
        if threshold >= b {
            threshold = a;
        }
        while est_level < k && values[est_level] <= threshold {
            est_left = est_left.plus(est[est_level]);
            est_level += 1;
        }
        if !cfg.est_limits.admits(est_left) || !cfg.est_limits.admits(est_all.minus(est_left)) {
            continue;
        }
        let (Some(sl), Some(sr)) = (rule.score(&left), rule.score(&suffix[g + 1])) else {
            continue;
        };
        let gain = sl + sr - parent_score;
        let scale = sl.abs().max(sr.abs()).max(parent_score.abs());
        if !(gain > F::lit(1e-10) * scale) || !gain.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|c| gain > c.gain) {
            *best = Some(Candidate {
                feature: f,
                threshold,
                gain,
            });
        }
    }
}

/// Grows a tree greedily on `split_rows`, carrying `est_rows` along.
///
/// `treated` is only needed when the limits constrain arm counts.
pub fn grow<F: Real, R: SplitRule<F>>(
    x: &Matrix<F>,
    treated: Option<&[bool]>,
    split_rows: Vec<usize>,
    est_rows: Vec<usize>,
    rule: &mut R,
    cfg: &GrowConfig,
    rng: &mut impl Rng,
) -> Tree<F> {
    grow_presorted(x, &FeatureOrder::new(x), treated, split_rows, est_rows, rule, cfg, rng)
}

/// [`grow`] with the feature order of `x` computed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn grow_presorted<F: Real, R: SplitRule<F>>(
    x: &Matrix<F>,
    order: &FeatureOrder<F>,
    treated: Option<&[bool]>,
    split_rows: Vec<usize>,
    est_rows: Vec<usize>,
    rule: &mut R,
    cfg: &GrowConfig,
    rng: &mut impl Rng,
) -> Tree<F> {
    let p = x.ncols();
    let mut tags = vec![0u8; x.nrows()];
    for &r in &split_rows {
        tags[r] |= 1;
    }
    for &r in &est_rows {
        tags[r] |= 2;
    }
    let mut split_sorted = Presorted::from_order(x, order, &tags, 1, split_rows.len());
    let mut est_sorted = Presorted::from_order(x, order, &tags, 2, est_rows.len());
    // smallest node the search can split
    let min_split = (2 * cfg.split_limits.min_total).max(2);
    let mut tree = Tree::stump(split_rows, est_rows);
    let mut scratch = Scratch {
        suffix: Vec::new(),
        acc: Vec::new(),
        split: Vec::new(),
        est: Vec::new(),
        present: Vec::new(),
    };
    let mut goes_left = vec![false; x.nrows()];
    let mut buf = Vec::new();
    let mut stack = vec![0usize];
    while let Some(k) = stack.pop() {
        let node = &tree.nodes[k];
        if cfg.max_depth.is_some_and(|d| node.depth >= d) {
            continue;
        }
        let (sa, sb) = node.split_range;
        let (ea, eb) = node.est_range;
        if sb - sa < 2 {
            continue;
        }
        rule.prepare(tree.split_rows_of(k));
        let mut total = rule.zero();
        for &r in tree.split_rows_of(k) {
            rule.add(&mut total, r);
        }
        let Some(parent_score) = rule.score(&total) else {
            continue;
        };
        let features: Vec<usize> = if cfg.mtry >= p {
            (0..p).collect()
        } else {
            let mut f = rand::seq::index::sample(rng, p, cfg.mtry.max(1)).into_vec();
            f.sort_unstable();
            f
        };
        // the draw above happens even here, so the stream does not depend on
        // which nodes are searched
        if sb - sa < min_split {
            continue;
        }
        let is_t = |r: &usize| treated.is_some_and(|t| t[*r]);
        let counts = |rows: &[usize]| Counts {
            total: rows.len(),
            treated: rows.iter().filter(|r| is_t(r)).count(),
        };
        let node_stats = (parent_score, counts(tree.split_rows_of(k)), counts(tree.est_rows_of(k)));
        let mut best = None;
        for f in features {
            match &order.kinds[f] {
                FeatureKind::Sorted(_) => best_for_feature(
                    treated,
                    split_sorted.col(f, (sa, sb)),
                    est_sorted.col(f, (ea, eb)),
                    f,
                    rule,
                    cfg,
                    node_stats,
                    &mut scratch,
                    &mut best,
                ),
                FeatureKind::Levels { values, level } => best_for_levels(
                    treated,
                    tree.split_rows_of(k),
                    tree.est_rows_of(k),
                    (values, level),
                    f,
                    rule,
                    cfg,
                    node_stats,
                    &mut scratch,
                    &mut best,
                ),
            }
        }
        if let Some(c) = best {
            for &r in tree.split_rows_of(k).iter().chain(tree.est_rows_of(k)) {
                goes_left[r] = x[(r, c.feature)] <= c.threshold;
            }
            let (l, r) = tree.force_split(x, k, c.feature, c.threshold);
            let depth_ok = cfg.max_depth.is_none_or(|d| tree.nodes[l].depth < d);
            let splittable = |c: usize| {
                let (a, b) = tree.nodes[c].split_range;
                b - a >= min_split
            };
            // children that will stay leaves never read the sorted columns
            if depth_ok && (splittable(l) || splittable(r)) {
                split_sorted.partition((sa, sb), &goes_left, &mut buf);
                est_sorted.partition((ea, eb), &goes_left, &mut buf);
            }
            if let Some(s) = tree.nodes[k].split.as_mut() {
                s.gain = c.gain;
            }
            stack.push(r);
            stack.push(l);
        }
    }
    tree
}

/// Squared-error rule on a response with frequency weights.
pub struct SquaredError<'a, F> {
    pub y: &'a [F],
    pub w: &'a [F],
}

impl<F: Real> SplitRule<F> for SquaredError<'_, F> {
    type Acc = (F, F);

    fn zero(&self) -> (F, F) {
        (F::zero(), F::zero())
    }

    fn add(&self, acc: &mut (F, F), row: usize) {
        acc.0 = acc.0 + self.w[row];
        acc.1 = acc.1 + self.w[row] * self.y[row];
    }

    fn merge(&self, acc: &mut (F, F), other: &(F, F)) {
        acc.0 = acc.0 + other.0;
        acc.1 = acc.1 + other.1;
    }

    fn score(&self, acc: &(F, F)) -> Option<F> {
        (acc.0 > F::zero()).then(|| acc.1 * acc.1 / acc.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn line(n: usize) -> (Matrix<f64>, Vec<f64>) {
        let x = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let y = (0..n).map(|i| if i < n / 3 { 0.0 } else { 1.0 }).collect();
        (x, y)
    }

    fn cfg(min_leaf: usize) -> GrowConfig {
        GrowConfig {
            split_limits: SideLimits::total(min_leaf),
            est_limits: SideLimits::total(min_leaf),
            mtry: 10,
            max_depth: None,
            max_thresholds: MAX_THRESHOLDS,
        }
    }

    #[test]
    fn finds_the_step_and_stops() {
        let (x, y) = line(30);
        let w = vec![1.0; 30];
        let rows: Vec<usize> = (0..30).collect();
        let mut rule = SquaredError { y: &y, w: &w };
        let t = grow(&x, None, rows.clone(), rows, &mut rule, &cfg(2), &mut stream(0, "t", 0));
        let s = t.nodes[0].split.unwrap();
        assert_eq!(s.feature, 0);
        assert_eq!(s.threshold, 9.5);
        assert_eq!(t.num_leaves(), 2);
        assert_eq!(t.leaf_of(&[3.0]), s.left);
    }

    #[test]
    fn leaves_partition_both_samples() {
        let n = 200;
        let x = Matrix::from_vec(n, 2, (0..2 * n).map(|i| ((i * 7919) % 211) as f64).collect()).unwrap();
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)].sin() + x[(i, 1)] / 50.0).collect();
        let w = vec![1.0; n];
        let split: Vec<usize> = (0..n).step_by(2).collect();
        let est: Vec<usize> = (1..n).step_by(2).collect();
        let mut rule = SquaredError { y: &y, w: &w };
        let t = grow(&x, None, split, est, &mut rule, &cfg(5), &mut stream(1, "t", 0));
        let mut seen = vec![0; n];
        for leaf in t.leaves() {
            assert!(t.est_rows_of(leaf).len() >= 5);
            assert!(t.split_rows_of(leaf).len() >= 5);
            for &r in t.est_rows_of(leaf) {
                seen[r] += 1;
                assert_eq!(t.leaf_of(x.row(r)), leaf);
            }
        }
        assert!((1..n).step_by(2).all(|r| seen[r] == 1));
    }

    #[test]
    fn threshold_cap_limits_candidates() {
        let n = 1000;
        let (x, y) = line(n);
        let w = vec![1.0; n];
        let rows: Vec<usize> = (0..n).collect();
        let mut c = cfg(1);
        c.max_thresholds = 4;
        c.max_depth = Some(1);
        let mut rule = SquaredError { y: &y, w: &w };
        let t = grow(&x, None, rows.clone(), rows, &mut rule, &c, &mut stream(0, "t", 0));
        let thr = t.nodes[0].split.unwrap().threshold;
        // allowed gaps are 249, 499, 749, 998
        assert!([249.5, 499.5, 749.5, 998.5].contains(&thr), "{thr}");
    }

    #[test]
    fn collapse_renumbers_and_keeps_rows() {
        let (x, y) = line(30);
        let y: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + (i % 2) as f64 * 0.01 * i as f64).collect();
        let w = vec![1.0; 30];
        let rows: Vec<usize> = (0..30).collect();
        let mut rule = SquaredError { y: &y, w: &w };
        let t = grow(&x, None, rows.clone(), rows, &mut rule, &cfg(2), &mut stream(0, "t", 0));
        assert!(t.depth() >= 2);
        let c = t.cut_at_depth(1);
        assert_eq!(c.depth(), 1);
        assert_eq!(c.num_leaves(), 2);
        let total: usize = c.leaves().map(|l| c.est_rows_of(l).len()).sum();
        assert_eq!(total, 30);
        let root = t.cut_at_depth(0);
        assert_eq!(root.nodes.len(), 1);
    }

    #[test]
    fn level_search_matches_sorted_search() {
        let n = 600;
        // three ordinal columns and one continuous, integer-valued response
        let x = Matrix::from_vec(
            n,
            4,
            (0..n)
                .flat_map(|i| [(i % 5) as f64, ((i * 7) % 3) as f64, ((i * 13) % 11) as f64, ((i * 7919) % 997) as f64])
                .collect(),
        )
        .unwrap();
        let y: Vec<f64> = (0..n).map(|i| (x[(i, 0)] * x[(i, 2)]) % 4.0 + x[(i, 1)]).collect();
        let w = vec![1.0; n];
        let split: Vec<usize> = (0..n).filter(|i| i % 3 != 0).collect();
        let est: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
        let mut c = cfg(3);
        c.mtry = 2;
        let fit = |order: &FeatureOrder<f64>| {
            let mut rule = SquaredError { y: &y, w: &w };
            grow_presorted(&x, order, None, split.clone(), est.clone(), &mut rule, &c, &mut stream(4, "t", 0))
        };
        let a = fit(&FeatureOrder::new(&x));
        let b = fit(&FeatureOrder::all_sorted(&x));
        assert!(a.nodes.len() > 10);
        assert_eq!(a, b);
    }
}
