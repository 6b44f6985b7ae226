//! Average effect estimators: naive difference, outcome regression, inverse
//! propensity weighting and augmented IPW, with linear cross-fit nuisances.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linear_models::{independent_columns, logistic_fit, ols_fit, predict_proba, CovarianceType};
use crate::matrix::{dot, Matrix};
use crate::rng::stream;
use crate::scalar::Real;
use crate::stats::mean_with_se;

/// Normal critical value for two-sided 95% intervals.
pub const Z95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Estimand {
    Ate,
    Att,
    /// Average effect within a labelled subgroup.
    Cate(String),
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimand::Ate => write!(f, "ATE"),
            Estimand::Att => write!(f, "ATT"),
            Estimand::Cate(g) => write!(f, "CATE[{g}]"),
        }
    }
}

impl From<Estimand> for String {
    fn from(e: Estimand) -> String {
        e.to_string()
    }
}

impl TryFrom<String> for Estimand {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "ATE" => Ok(Estimand::Ate),
            "ATT" => Ok(Estimand::Att),
            _ => s
                .strip_prefix("CATE[")
                .and_then(|r| r.strip_suffix(']'))
                .map(|g| Estimand::Cate(g.to_string()))
                .ok_or_else(|| format!("unknown estimand `{s}`")),
        }
    }
}

/// Point estimate with standard error and normal 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport<F> {
    pub estimand: Estimand,
    pub estimator: String,
    pub estimate: F,
    pub se: F,
    pub ci_lo: F,
    pub ci_hi: F,
    pub n: usize,
}

impl<F: Real> EstimateReport<F> {
    pub fn new(estimand: Estimand, estimator: &str, estimate: F, se: F, n: usize) -> Self {
        let half = F::lit(Z95) * se;
        Self {
            estimand,
            estimator: estimator.to_string(),
            estimate,
            se,
            ci_lo: estimate - half,
            ci_hi: estimate + half,
            n,
        }
    }

    pub fn covers(&self, value: F) -> bool {
        self.ci_lo <= value && value <= self.ci_hi
    }

    pub fn half_width(&self) -> F {
        (self.ci_hi - self.ci_lo) / F::lit(2.0)
    }
}

/// Per-unit nuisance predictions. Fields stay `None` until some model fills
/// them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NuisanceEstimates<F> {
    pub e_hat: Option<Vec<F>>,
    pub m_hat: Option<Vec<F>>,
    pub mu0_hat: Option<Vec<F>>,
    pub mu1_hat: Option<Vec<F>>,
    /// 1-based fold of each unit; all ones without cross-fitting.
    pub fold_id: Vec<usize>,
    pub clip_bounds: (F, F),
    /// Sampling variance of the outcome-model contrast, when the model
    /// supplies one.
    pub outcome_model_variance: Option<F>,
}

pub const DEFAULT_CLIP: (f64, f64) = (0.01, 0.99);

impl<F: Real> NuisanceEstimates<F> {
    pub fn empty(n: usize) -> Self {
        Self {
            e_hat: None,
            m_hat: None,
            mu0_hat: None,
            mu1_hat: None,
            fold_id: vec![1; n],
            clip_bounds: (F::lit(DEFAULT_CLIP.0), F::lit(DEFAULT_CLIP.1)),
            outcome_model_variance: None,
        }
    }

    /// Nuisances from known surfaces, e.g. a simulation's ground truth.
    /// `m_hat` is filled as `e mu1 + (1 - e) mu0`.
    pub fn from_surfaces(e: Vec<F>, mu0: Vec<F>, mu1: Vec<F>) -> Self {
        let m = e
            .iter()
            .zip(mu0.iter().zip(&mu1))
            .map(|(&e, (&a, &b))| e * b + (F::one() - e) * a)
            .collect();
        Self {
            e_hat: Some(e),
            m_hat: Some(m),
            mu0_hat: Some(mu0.clone()),
            mu1_hat: Some(mu1),
            ..Self::empty(mu0.len())
        }
    }

    /// Clamps `e_hat` into `clip_bounds`.
    pub fn clipped(mut self) -> Self {
        let (lo, hi) = self.clip_bounds;
        if let Some(e) = &mut self.e_hat {
            e.iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        }
        self
    }

    /// Fills `mu0_hat` and `mu1_hat` from `m_hat`, `e_hat` and an effect
    /// surface: `mu0 = m - e tau`, `mu1 = m + (1 - e) tau`.
    pub fn with_tau(mut self, tau: &[F]) -> Result<Self> {
        let (m, e) = (self.m()?, self.e()?);
        check_len(tau.len(), m.len(), "tau_hat")?;
        let mu0 = m.iter().zip(e).zip(tau).map(|((&m, &e), &t)| m - e * t).collect();
        let mu1 = m
            .iter()
            .zip(e)
            .zip(tau)
            .map(|((&m, &e), &t)| m + (F::one() - e) * t)
            .collect();
        self.mu0_hat = Some(mu0);
        self.mu1_hat = Some(mu1);
        Ok(self)
    }

    fn e(&self) -> Result<&[F]> {
        self.e_hat.as_deref().ok_or(Error::MissingNuisance("e_hat"))
    }
    fn m(&self) -> Result<&[F]> {
        self.m_hat.as_deref().ok_or(Error::MissingNuisance("m_hat"))
    }
    fn mu0(&self) -> Result<&[F]> {
        self.mu0_hat.as_deref().ok_or(Error::MissingNuisance("mu0_hat"))
    }
    fn mu1(&self) -> Result<&[F]> {
        self.mu1_hat.as_deref().ok_or(Error::MissingNuisance("mu1_hat"))
    }
}

fn check_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

fn check_open_unit<F: Real>(e: &[F]) -> Result<()> {
    if let Some(i) = e.iter().position(|&v| !(v > F::zero() && v < F::one())) {
        return Err(Error::PropensityOutOfBounds {
            index: i,
            value: e[i].as_f64(),
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

fn check_clip<F: Real>(e: &[F], (lo, hi): (F, F)) -> Result<()> {
    let slack = F::epsilon() * F::lit(4.0);
    if let Some(i) = e.iter().position(|&v| !(v >= lo - slack && v <= hi + slack)) {
        return Err(Error::PropensityOutOfBounds {
            index: i,
            value: e[i].as_f64(),
            lo: lo.as_f64(),
            hi: hi.as_f64(),
        });
    }
    Ok(())
}

/// Weighted difference of arm means with the two-sample standard error.
pub fn naive_diff<F: Real>(ds: &Dataset<F>) -> Result<EstimateReport<F>> {
    ds.require_both_arms()?;
    let (mut y1, mut s1, mut y0, mut s0) = (vec![], vec![], vec![], vec![]);
    for ((&w, &y), &s) in ds.treatment().iter().zip(ds.outcome()).zip(ds.weights()) {
        if w {
            y1.push(y);
            s1.push(s);
        } else {
            y0.push(y);
            s0.push(s);
        }
    }
    let (m1, se1) = mean_with_se(&y1, &s1);
    let (m0, se0) = mean_with_se(&y0, &s0);
    Ok(EstimateReport::new(
        Estimand::Ate,
        "naive",
        m1 - m0,
        (se1 * se1 + se0 * se0).sqrt(),
        ds.n(),
    ))
}

/// Outcome-regression ATE: weighted mean of `mu1 - mu0`.
pub fn reg_ate<F: Real>(ds: &Dataset<F>, nuis: &NuisanceEstimates<F>) -> Result<EstimateReport<F>> {
    let (mu0, mu1) = (nuis.mu0()?, nuis.mu1()?);
    check_len(mu0.len(), ds.n(), "mu0_hat")?;
    check_len(mu1.len(), ds.n(), "mu1_hat")?;
    let d: Vec<F> = mu1.iter().zip(mu0).map(|(&a, &b)| a - b).collect();
    let (est, se) = mean_with_se(&d, ds.weights());
    let var = se * se + nuis.outcome_model_variance.unwrap_or(F::zero());
    Ok(EstimateReport::new(Estimand::Ate, "regression", est, var.sqrt(), ds.n()))
}

/// Normalization of inverse propensity weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpwNormalization {
    /// Weights renormalized to sum to one within each arm.
    #[default]
    Hajek,
    /// Raw `W Y / e - (1 - W) Y / (1 - e)`.
    HorvitzThompson,
}

pub fn ipw_ate<F: Real>(
    ds: &Dataset<F>,
    nuis: &NuisanceEstimates<F>,
    normalization: IpwNormalization,
) -> Result<EstimateReport<F>> {
    let e = nuis.e()?;
    check_len(e.len(), ds.n(), "e_hat")?;
    check_open_unit(e)?;
    ds.require_both_arms()?;
    let (w, y, s) = (ds.treatment(), ds.outcome(), ds.weights());
    let one = F::one();
    let psi: Vec<F> = match normalization {
        IpwNormalization::HorvitzThompson => (0..ds.n())
            .map(|i| if w[i] { y[i] / e[i] } else { -y[i] / (one - e[i]) })
            .collect(),
        IpwNormalization::Hajek => {
            // Influence-function summands whose weighted mean is the Hajek
            // contrast exactly.
            let (mut sa, mut sb, mut ya, mut yb, mut total) = (F::zero(), F::zero(), F::zero(), F::zero(), F::zero());
            for i in 0..ds.n() {
                total = total + s[i];
                if w[i] {
                    sa = sa + s[i] / e[i];
                    ya = ya + s[i] * y[i] / e[i];
                } else {
                    sb = sb + s[i] / (one - e[i]);
                    yb = yb + s[i] * y[i] / (one - e[i]);
                }
            }
            let (mu1, mu0) = (ya / sa, yb / sb);
            (0..ds.n())
                .map(|i| {
                    let corr = if w[i] {
                        (y[i] - mu1) / e[i] * total / sa
                    } else {
                        -(y[i] - mu0) / (one - e[i]) * total / sb
                    };
                    mu1 - mu0 + corr
                })
                .collect()
        }
    };
    let (est, se) = mean_with_se(&psi, s);
    let tag = match normalization {
        IpwNormalization::Hajek => "ipw",
        IpwNormalization::HorvitzThompson => "ipw_ht",
    };
    Ok(EstimateReport::new(Estimand::Ate, tag, est, se, ds.n()))
}

/// Population an average effect is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    All,
    Treated,
}

/// Augmented IPW for the ATE (`target = All`) or the ATT.
pub fn aipw_ate<F: Real>(
    ds: &Dataset<F>,
    nuis: &NuisanceEstimates<F>,
    target: Target,
) -> Result<EstimateReport<F>> {
    let n = ds.n();
    let e = nuis.e()?;
    let mu0 = nuis.mu0()?;
    check_len(e.len(), n, "e_hat")?;
    check_len(mu0.len(), n, "mu0_hat")?;
    check_open_unit(e)?;
    let (w, y, s) = (ds.treatment(), ds.outcome(), ds.weights());
    let one = F::one();
    match target {
        Target::All => {
            let mu1 = nuis.mu1()?;
            check_len(mu1.len(), n, "mu1_hat")?;
            let gamma: Vec<F> = (0..n)
                .map(|i| {
                    let base = mu1[i] - mu0[i];
                    if w[i] {
                        base + (y[i] - mu1[i]) / e[i]
                    } else {
                        base - (y[i] - mu0[i]) / (one - e[i])
                    }
                })
                .collect();
            let (est, se) = mean_with_se(&gamma, s);
            Ok(EstimateReport::new(Estimand::Ate, "aipw", est, se, n))
        }
        Target::Treated => {
            let (t, _) = ds.arm_sizes();
            if t == 0 {
                return Err(Error::EmptyArm("treated"));
            }
            let psi: Vec<F> = (0..n)
                .map(|i| {
                    let r = y[i] - mu0[i];
                    if w[i] {
                        r
                    } else {
                        -e[i] / (one - e[i]) * r
                    }
                })
                .collect();
            let (mut num, mut den, mut total) = (F::zero(), F::zero(), F::zero());
            for i in 0..n {
                num = num + s[i] * psi[i];
                total = total + s[i];
                if w[i] {
                    den = den + s[i];
                }
            }
            let att = num / den;
            let share = den / total;
            let phi: Vec<F> = (0..n)
                .map(|i| (psi[i] - if w[i] { att } else { F::zero() }) / share)
                .collect();
            let (_, se) = mean_with_se(&phi, s);
            Ok(EstimateReport::new(Estimand::Att, "aipw", att, se, n))
        }
    }
}

/// Per-unit doubly robust scores built around an effect surface `tau_hat`,
/// with `mu0 = m - e tau` and `mu1 = m + (1 - e) tau`.
pub fn aipw_scores<F: Real>(ds: &Dataset<F>, nuis: &NuisanceEstimates<F>, tau_hat: &[F]) -> Result<Vec<F>> {
    let n = ds.n();
    let (e, m) = (nuis.e()?, nuis.m()?);
    check_len(tau_hat.len(), n, "tau_hat")?;
    check_len(e.len(), n, "e_hat")?;
    check_len(m.len(), n, "m_hat")?;
    check_clip(e, nuis.clip_bounds)?;
    let one = F::one();
    Ok((0..n)
        .map(|i| {
            let mu0 = m[i] - e[i] * tau_hat[i];
            let mu1 = m[i] + (one - e[i]) * tau_hat[i];
            let y = ds.outcome()[i];
            if ds.treatment()[i] {
                tau_hat[i] + (y - mu1) / e[i]
            } else {
                tau_hat[i] - (y - mu0) / (one - e[i])
            }
        })
        .collect())
}

/// Random balanced assignment of `n` units to folds `1..=k`.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let k = k.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "folds", 0));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k + 1;
    }
    fold
}

/// Linear outcome model used for `mu0`, `mu1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeModel {
    /// Separate regressions in each arm.
    #[default]
    ArmLinear,
    /// One regression on covariates plus a treatment dummy.
    DummyLinear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NuisanceConfig {
    /// Cross-fitting folds; 1 fits and predicts on the full sample.
    pub folds: usize,
    pub outcome_model: OutcomeModel,
    pub clip: (f64, f64),
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            outcome_model: OutcomeModel::ArmLinear,
            clip: DEFAULT_CLIP,
        }
    }
}

/// Cross-fit logistic propensities and linear outcome models.
pub fn fit_linear_nuisances<F: Real>(
    ds: &Dataset<F>,
    config: &NuisanceConfig,
    seed: u64,
) -> Result<NuisanceEstimates<F>> {
    ds.require_both_arms()?;
    let (x, _) = ds.linear_design()?;
    let n = ds.n();
    let k = config.folds.max(1);
    let fold_id = if k == 1 { vec![1; n] } else { fold_assignment(n, k, seed) };
    let (w, y, s) = (ds.treatment(), ds.outcome(), ds.weights());

    let mut e_hat = vec![F::zero(); n];
    let mut mu0 = vec![F::zero(); n];
    let mut mu1 = vec![F::zero(); n];
    let mut var_sum = F::zero();

    for fold in 1..=k {
        let train: Vec<usize> = (0..n).filter(|&i| k == 1 || fold_id[i] != fold).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_id[i] == fold).collect();
        let pick = |v: &[F], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<F>>();

        let xt = x.select_rows(&train);
        let cols = independent_columns(&xt);
        let xt = xt.select_columns(&cols);
        let xtest = x.select_rows(&test).select_columns(&cols);
        let wt: Vec<bool> = train.iter().map(|&i| w[i]).collect();
        let fit = logistic_fit(&xt, &wt, &pick(s, &train))?;
        for (&i, p) in test.iter().zip(predict_proba(&fit, &xtest)?) {
            e_hat[i] = p;
        }

        match config.outcome_model {
            OutcomeModel::ArmLinear => {
                let xbar = weighted_column_means(&x, s);
                for arm in [false, true] {
                    let rows: Vec<usize> = train.iter().copied().filter(|&i| w[i] == arm).collect();
                    if rows.is_empty() {
                        return Err(Error::EmptyArm(if arm { "treated" } else { "control" }));
                    }
                    let xa = x.select_rows(&rows);
                    let cols = independent_columns(&xa);
                    let fit = ols_fit(&xa.select_columns(&cols), &pick(y, &rows), &pick(s, &rows), CovarianceType::HC3)?;
                    let pred = fit.predict(&x.select_rows(&test).select_columns(&cols))?;
                    let target = if arm { &mut mu1 } else { &mut mu0 };
                    for (&i, v) in test.iter().zip(pred) {
                        target[i] = v;
                    }
                    let g: Vec<F> = cols.iter().map(|&j| xbar[j]).collect();
                    let vg = fit.covariance.matvec(&g)?;
                    var_sum = var_sum + dot(&g, &vg);
                }
            }
            OutcomeModel::DummyLinear => {
                let wcol = Matrix::column_vector(&ds.treatment_f());
                let xd = x.hstack(&wcol)?.select_rows(&train);
                let cols = independent_columns(&xd);
                if cols.last() != Some(&x.ncols()) {
                    return Err(Error::SingularDesign {
                        index: x.ncols(),
                        name: "treatment".into(),
                    });
                }
                let fit = ols_fit(&xd.select_columns(&cols), &pick(y, &train), &pick(s, &train), CovarianceType::HC3)?;
                let beta_w = *fit.coefficients.last().expect("treatment coefficient");
                let xcols = &cols[..cols.len() - 1];
                let base = x.select_rows(&test).select_columns(xcols).matvec(&fit.coefficients[..xcols.len()])?;
                for (&i, b) in test.iter().zip(base) {
                    mu0[i] = b;
                    mu1[i] = b + beta_w;
                }
                let last = fit.coefficients.len() - 1;
                var_sum = var_sum + fit.covariance[(last, last)];
            }
        }
    }

    let mut nuis = NuisanceEstimates::from_surfaces(e_hat, mu0, mu1);
    nuis.fold_id = fold_id;
    nuis.clip_bounds = (F::lit(config.clip.0), F::lit(config.clip.1));
    nuis.outcome_model_variance = Some(var_sum / F::from_count(k));
    let mut nuis = nuis.clipped();
    // keep m consistent with the clipped propensity
    let e = nuis.e_hat.as_ref().expect("set");
    let (a, b) = (nuis.mu0_hat.as_ref().expect("set"), nuis.mu1_hat.as_ref().expect("set"));
    nuis.m_hat = Some((0..n).map(|i| e[i] * b[i] + (F::one() - e[i]) * a[i]).collect());
    Ok(nuis)
}

fn weighted_column_means<F: Real>(x: &Matrix<F>, s: &[F]) -> Vec<F> {
    let total: F = s.iter().copied().sum();
    (0..x.ncols())
        .map(|j| (0..x.nrows()).map(|i| s[i] * x[(i, j)]).sum::<F>() / total)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(w: &[bool], y: &[f64]) -> Dataset<f64> {
        let n = y.len();
        let x = Matrix::from_columns(&[(0..n).map(|i| i as f64).collect()]).unwrap();
        Dataset::new(x, w.to_vec(), y.to_vec(), None, vec!["x".into()]).unwrap()
    }

    #[test]
    fn naive_exact_when_outcome_is_treatment() {
        let w = [true, false, true, false, true];
        let y: Vec<f64> = w.iter().map(|&t| f64::from(u8::from(t))).collect();
        let r = naive_diff(&toy(&w, &y)).unwrap();
        assert_eq!((r.estimate, r.se), (1.0, 0.0));
        assert_eq!(r.ci_lo, r.ci_hi);
    }

    #[test]
    fn report_interval_and_json() {
        let r = EstimateReport::new(Estimand::Cate("q1".into()), "aipw", 0.3f64, 0.1, 10);
        assert!((r.ci_lo - (0.3 - 0.196)).abs() < 1e-12);
        assert!((r.ci_hi - (0.3 + 0.196)).abs() < 1e-12);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"estimand\":\"CATE[q1]\""));
        let back: EstimateReport<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn missing_nuisance_is_reported() {
        let ds = toy(&[true, false], &[1.0, 0.0]);
        let nuis = NuisanceEstimates::<f64>::empty(2);
        assert!(matches!(reg_ate(&ds, &nuis), Err(Error::MissingNuisance("mu0_hat"))));
        assert!(matches!(
            ipw_ate(&ds, &nuis, IpwNormalization::Hajek),
            Err(Error::MissingNuisance("e_hat"))
        ));
    }

    #[test]
    fn ipw_rejects_boundary_propensity() {
        let ds = toy(&[true, false], &[1.0, 0.0]);
        let nuis = NuisanceEstimates::from_surfaces(vec![1.0, 0.5], vec![0.0; 2], vec![0.0; 2]);
        assert!(matches!(
            ipw_ate(&ds, &nuis, IpwNormalization::Hajek),
            Err(Error::PropensityOutOfBounds { index: 0, .. })
        ));
    }

    #[test]
    fn scores_of_residual_free_unit_equal_tau() {
        let ds = toy(&[true, false], &[2.0, 1.0]);
        // m = e mu1 + (1 - e) mu0 with mu0 = 1, mu1 = 2, e = 0.5
        let mut nuis = NuisanceEstimates::empty(2);
        nuis.e_hat = Some(vec![0.5, 0.5]);
        nuis.m_hat = Some(vec![1.5, 1.5]);
        let g = aipw_scores(&ds, &nuis, &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
        nuis.e_hat = Some(vec![0.5, 0.001]);
        assert!(aipw_scores(&ds, &nuis, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn folds_are_balanced() {
        let f = fold_assignment(103, 5, 9);
        for k in 1..=5 {
            let c = f.iter().filter(|&&v| v == k).count();
            assert!(c == 20 || c == 21);
        }
        assert_eq!(f, fold_assignment(103, 5, 9));
    }
}
