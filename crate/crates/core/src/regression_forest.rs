//! Honest subsampled regression forest with out-of-bag predictions, used for
//! the nuisance surfaces `m(x) = E[Y | X = x]` and `e(x) = E[W | X = x]`.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::stream;
use crate::scalar::Real;
use crate::tree::{grow_presorted, FeatureOrder, GrowConfig, SideLimits, SquaredError, Tree, MAX_THRESHOLDS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub num_trees: usize,
    pub min_leaf: usize,
    pub subsample_fraction: f64,
    /// `None` means `ceil(sqrt(p) + 20)` capped at `p`.
    pub mtry: Option<usize>,
    pub honesty: bool,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            num_trees: 2000,
            min_leaf: 5,
            subsample_fraction: 0.5,
            mtry: None,
            honesty: true,
            max_depth: None,
            seed: 0,
        }
    }
}

/// Default number of candidate features per split.
pub fn default_mtry(p: usize) -> usize {
    (((p as f64).sqrt() + 20.0).ceil() as usize).min(p).max(1)
}

/// Fixed-size bitset over training rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSet {
    bits: Vec<u64>,
}

impl RowSet {
    pub fn new(n: usize, rows: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![0u64; n.div_ceil(64)];
        for r in rows {
            bits[r / 64] |= 1 << (r % 64);
        }
        Self { bits }
    }

    pub fn contains(&self, r: usize) -> bool {
        self.bits.get(r / 64).is_some_and(|b| b >> (r % 64) & 1 == 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree<F> {
    pub tree: Tree<F>,
    /// Weighted estimation-sample mean for every node.
    pub node_means: Vec<F>,
    pub subsample: RowSet,
}

impl<F: Real> RegressionTree<F> {
    pub fn predict_row(&self, x: &[F]) -> F {
        self.node_means[self.tree.leaf_of(x)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest<F> {
    pub trees: Vec<RegressionTree<F>>,
    pub params: ForestParams,
    pub oob_predictions: Vec<F>,
    /// Training rows no tree left out; their OOB entry is the full-forest
    /// prediction.
    pub oob_uncovered: Vec<usize>,
    pub num_features: usize,
}

/// `(split rows, estimation rows)` of one tree.
pub type TreeSample = (Vec<usize>, Vec<usize>);

fn check_inputs<F: Real>(x: &Matrix<F>, y: &[F], weights: Option<&[F]>, min_leaf: usize) -> Result<()> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Dimension(format!("{} responses for {n} rows", y.len())));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Dimension(format!("{} weights for {n} rows", w.len())));
        }
    }
    if n < 2 * min_leaf.max(1) {
        return Err(Error::Infeasible(format!("{n} rows cannot hold two leaves of {min_leaf}")));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::MissingValues(x.as_slice().iter().filter(|v| !v.is_finite()).count()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite response".into()));
    }
    Ok(())
}

/// Subsample of `floor(fraction n)` distinct rows drawn for tree `b`, halved
/// into split and estimation rows when `honesty` is on.
pub fn draw_sample(n: usize, fraction: f64, honesty: bool, seed: u64, label: &str, b: usize) -> TreeSample {
    let mut rng = stream(seed, label, b as u64);
    let size = ((fraction * n as f64).floor() as usize).clamp(2.min(n), n);
    let mut rows = rand::seq::index::sample(&mut rng, n, size).into_vec();
    rows.shuffle(&mut rng);
    if honesty {
        let est = rows.split_off(rows.len() / 2);
        (rows, est)
    } else {
        (rows.clone(), rows)
    }
}

pub fn rf_fit<F: Real>(
    x: &Matrix<F>,
    y: &[F],
    params: &ForestParams,
    weights: Option<&[F]>,
) -> Result<RegressionForest<F>> {
    check_inputs(x, y, weights, params.min_leaf)?;
    if params.num_trees == 0 {
        return Err(Error::Invalid("num_trees must be positive".into()));
    }
    if !(params.subsample_fraction > 0.0 && params.subsample_fraction <= 1.0) {
        return Err(Error::Invalid("subsample_fraction must lie in (0, 1]".into()));
    }
    let n = x.nrows();
    let samples: Vec<TreeSample> = (0..params.num_trees)
        .map(|b| draw_sample(n, params.subsample_fraction, params.honesty, params.seed, "rf-sample", b))
        .collect();
    rf_fit_with_samples(x, y, params, weights, &samples)
}

/// Fits one tree per supplied sample, ignoring `params.num_trees` and the
/// subsampling settings.
pub fn rf_fit_with_samples<F: Real>(
    x: &Matrix<F>,
    y: &[F],
    params: &ForestParams,
    weights: Option<&[F]>,
    samples: &[TreeSample],
) -> Result<RegressionForest<F>> {
    check_inputs(x, y, weights, params.min_leaf)?;
    let n = x.nrows();
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = vec![F::one(); n];
            &ones
        }
    };
    if samples.iter().flat_map(|(s, e)| s.iter().chain(e)).any(|&r| r >= n) {
        return Err(Error::Dimension("sample row out of range".into()));
    }
    let cfg = GrowConfig {
        split_limits: SideLimits::total(params.min_leaf),
        est_limits: SideLimits::total(params.min_leaf),
        mtry: params.mtry.unwrap_or_else(|| default_mtry(x.ncols())),
        max_depth: params.max_depth,
        max_thresholds: MAX_THRESHOLDS,
    };
    let order = FeatureOrder::new(x);
    let trees: Vec<RegressionTree<F>> = samples
        .par_iter()
        .enumerate()
        .map(|(b, (split, est))| {
            let mut rng = stream(params.seed, "rf-tree", b as u64);
            let mut rule = SquaredError { y, w };
            let tree = grow_presorted(x, &order, None, split.clone(), est.clone(), &mut rule, &cfg, &mut rng);
            let node_means = (0..tree.nodes.len())
                .map(|k| {
                    let rows = tree.est_rows_of(k);
                    let (sw, swy) = rows
                        .iter()
                        .fold((F::zero(), F::zero()), |(a, b), &r| (a + w[r], b + w[r] * y[r]));
                    if sw > F::zero() {
                        swy / sw
                    } else {
                        F::nan()
                    }
                })
                .collect();
            let subsample = RowSet::new(n, split.iter().chain(est).copied());
            RegressionTree {
                tree,
                node_means,
                subsample,
            }
        })
        .collect();

    let mut forest = RegressionForest {
        trees,
        params: params.clone(),
        oob_predictions: Vec::new(),
        oob_uncovered: Vec::new(),
        num_features: x.ncols(),
    };
    let oob: Vec<(F, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let (mut sum, mut count) = (F::zero(), 0usize);
            for t in forest.trees.iter().filter(|t| !t.subsample.contains(i)) {
                sum = sum + t.predict_row(row);
                count += 1;
            }
            if count > 0 {
                (sum / F::from_count(count), false)
            } else {
                (forest.predict_row(row), true)
            }
        })
        .collect();
    forest.oob_uncovered = oob.iter().enumerate().filter(|(_, o)| o.1).map(|(i, _)| i).collect();
    forest.oob_predictions = oob.into_iter().map(|o| o.0).collect();
    if !forest.oob_uncovered.is_empty() {
        log::warn!(
            "{} training rows fall in every subsample; using full-forest predictions for them",
            forest.oob_uncovered.len()
        );
    }
    Ok(forest)
}

impl<F: Real> RegressionForest<F> {
    pub fn predict_row(&self, x: &[F]) -> F {
        let sum = self.trees.iter().fold(F::zero(), |a, t| a + t.predict_row(x));
        sum / F::from_count(self.trees.len())
    }
}

pub fn rf_predict<F: Real>(forest: &RegressionForest<F>, x: &Matrix<F>) -> Result<Vec<F>> {
    if x.ncols() != forest.num_features {
        return Err(Error::Dimension(format!(
            "forest has {} features, query has {}",
            forest.num_features,
            x.ncols()
        )));
    }
    Ok((0..x.nrows())
        .into_par_iter()
        .map(|i| forest.predict_row(x.row(i)))
        .collect())
}

pub fn rf_predict_oob<F: Real>(forest: &RegressionForest<F>) -> &[F] {
    &forest.oob_predictions
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rowset_membership() {
        let s = RowSet::new(130, [0, 64, 129]);
        assert!(s.contains(0) && s.contains(64) && s.contains(129));
        assert!(!s.contains(1) && !s.contains(128) && !s.contains(500));
    }

    #[test]
    fn default_mtry_caps_at_p() {
        assert_eq!(default_mtry(10), 10);
        assert_eq!(default_mtry(400), 40);
    }

    #[test]
    fn one_tree_oob_bookkeeping() {
        let n = 40;
        let x = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let y: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
        let first: Vec<usize> = (0..n / 2).collect();
        let sample = (first[..10].to_vec(), first[10..].to_vec());
        let params = ForestParams {
            num_trees: 1,
            ..ForestParams::default()
        };
        let f = rf_fit_with_samples(&x, &y, &params, None, &[sample]).unwrap();
        assert_eq!(f.oob_uncovered, first);
        for i in n / 2..n {
            assert_eq!(f.oob_predictions[i], f.trees[0].predict_row(x.row(i)));
        }
    }

    #[test]
    fn rejects_tiny_and_missing() {
        let x = Matrix::from_vec(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!(rf_fit(&x, &[0.0; 6], &ForestParams::default(), None).is_err());
        let x = Matrix::from_vec(12, 1, (0..12).map(|i| if i == 3 { f64::NAN } else { i as f64 }).collect()).unwrap();
        assert!(matches!(
            rf_fit(&x, &[0.0; 12], &ForestParams::default(), None),
            Err(Error::MissingValues(1))
        ));
    }
}
