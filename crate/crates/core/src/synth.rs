//! Synthetic data-generating processes with known effects, including a
//! generator shaped like the Japanese social stratification survey sample.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{age_cohort, ColumnKind, Dataset, DatasetBuilder, DEFAULT_COHORTS, SURVEY_YEAR};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, StreamRng};
use crate::scalar::Real;
use crate::stats::logistic;

/// Overlap bounds every generated propensity is clipped into.
pub const PROPENSITY_BOUNDS: (f64, f64) = (0.02, 0.98);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    /// Independent standard normals.
    Normal,
    /// Independent uniforms on (-1, 1).
    Uniform,
}

/// Baseline outcome surface `f(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Baseline {
    Zero,
    /// `sum_j coef[j] x_j`.
    Linear { coef: Vec<f64> },
    /// `amplitude sin(frequency x_feature)`.
    Sine {
        feature: usize,
        amplitude: f64,
        frequency: f64,
    },
}

/// Propensity surface `e(x)`, before clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Propensity {
    Constant { p: f64 },
    /// `logistic(intercept + sum_j coef[j] x_j)`.
    Logistic { intercept: f64, coef: Vec<f64> },
    /// `logistic(amplitude sin(frequency x_feature))`.
    LogisticSine {
        feature: usize,
        amplitude: f64,
        frequency: f64,
    },
}

/// Effect surface `tau(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Effect {
    Constant { tau: f64 },
    /// `intercept + sum_j coef[j] x_j`.
    Linear { intercept: f64, coef: Vec<f64> },
    /// `high` when `x_feature > threshold`, else `low`.
    Step {
        feature: usize,
        threshold: f64,
        low: f64,
        high: f64,
    },
}

fn linear(coef: &[f64], x: &[f64]) -> f64 {
    coef.iter().zip(x).map(|(c, v)| c * v).sum()
}

impl Baseline {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Baseline::Zero => 0.0,
            Baseline::Linear { coef } => linear(coef, x),
            Baseline::Sine {
                feature,
                amplitude,
                frequency,
            } => amplitude * (frequency * x[*feature]).sin(),
        }
    }
}

impl Propensity {
    /// Clipped propensity.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let raw = match self {
            Propensity::Constant { p } => *p,
            Propensity::Logistic { intercept, coef } => logistic(intercept + linear(coef, x)),
            Propensity::LogisticSine {
                feature,
                amplitude,
                frequency,
            } => logistic(amplitude * (frequency * x[*feature]).sin()),
        };
        raw.clamp(PROPENSITY_BOUNDS.0, PROPENSITY_BOUNDS.1)
    }
}

impl Effect {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Effect::Constant { tau } => *tau,
            Effect::Linear { intercept, coef } => intercept + linear(coef, x),
            Effect::Step {
                feature,
                threshold,
                low,
                high,
            } => {
                if x[*feature] > *threshold {
                    *high
                } else {
                    *low
                }
            }
        }
    }
}

/// `Y = f(X) + W tau(X) + eps`, `W ~ Bernoulli(e(X))`, `eps ~ N(0, noise_sd^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDgp {
    pub n: usize,
    pub p: usize,
    pub covariates: CovariateLaw,
    pub baseline: Baseline,
    pub propensity: Propensity,
    pub effect: Effect,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Ground truth retained alongside a generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Truth<F> {
    pub tau: Vec<F>,
    pub f: Vec<F>,
    pub e: Vec<F>,
    /// Realized noise, `Y - f - W tau`.
    pub epsilon: Vec<F>,
    pub ate_true: F,
    pub att_true: F,
}

impl<F: Real> Truth<F> {
    /// True `mu0 = f` and `mu1 = f + tau` with the true propensity.
    pub fn oracle_nuisances(&self) -> crate::estimators::NuisanceEstimates<F> {
        let mu1 = self.f.iter().zip(&self.tau).map(|(&a, &b)| a + b).collect();
        crate::estimators::NuisanceEstimates::from_surfaces(self.e.clone(), self.f.clone(), mu1)
    }
}

fn finish<F: Real>(
    b: DatasetBuilder<F>,
    treatment: Vec<bool>,
    f: Vec<f64>,
    tau: Vec<f64>,
    e: Vec<f64>,
    noise: Vec<f64>,
    weights: Option<Vec<F>>,
) -> Result<(Dataset<F>, Truth<F>)> {
    let f: Vec<F> = f.into_iter().map(F::lit).collect();
    let tau: Vec<F> = tau.into_iter().map(F::lit).collect();
    let wf = |t: bool| if t { F::one() } else { F::zero() };
    let y: Vec<F> = (0..f.len())
        .map(|i| f[i] + wf(treatment[i]) * tau[i] + F::lit(noise[i]))
        .collect();
    let epsilon = (0..f.len()).map(|i| y[i] - f[i] - wf(treatment[i]) * tau[i]).collect();
    let ate_true = tau.iter().copied().sum::<F>() / F::from_count(tau.len());
    let treated: Vec<F> = tau
        .iter()
        .zip(&treatment)
        .filter(|(_, &t)| t)
        .map(|(&v, _)| v)
        .collect();
    let att_true = if treated.is_empty() {
        F::nan()
    } else {
        treated.iter().copied().sum::<F>() / F::from_count(treated.len())
    };
    let ds = b.build(treatment, y, weights)?;
    let truth = Truth {
        tau,
        f,
        e: e.into_iter().map(F::lit).collect(),
        epsilon,
        ate_true,
        att_true,
    };
    Ok((ds, truth))
}

/// Draws a dataset from `dgp`.
pub fn gen<F: Real>(dgp: &SyntheticDgp) -> Result<(Dataset<F>, Truth<F>)> {
    if dgp.n == 0 || dgp.p == 0 {
        return Err(Error::Invalid("need n >= 1 and p >= 1".into()));
    }
    if !(dgp.noise_sd >= 0.0) {
        return Err(Error::Invalid(format!("noise sd {} is negative", dgp.noise_sd)));
    }
    let (n, p) = (dgp.n, dgp.p);
    let mut xr = stream(dgp.seed, "synth-x", 0);
    let mut wr = stream(dgp.seed, "synth-w", 0);
    let mut er = stream(dgp.seed, "synth-eps", 0);
    let mut x = Matrix::<f64>::zeros(n, p);
    for i in 0..n {
        for v in x.row_mut(i) {
            *v = match dgp.covariates {
                CovariateLaw::Normal => xr.sample(StandardNormal),
                CovariateLaw::Uniform => xr.random_range(-1.0..1.0),
            };
        }
    }
    let (mut f, mut tau, mut e, mut w, mut noise) = (vec![], vec![], vec![], vec![], vec![]);
    for row in x.rows_iter() {
        f.push(dgp.baseline.eval(row));
        tau.push(dgp.effect.eval(row));
        let ei = dgp.propensity.eval(row);
        e.push(ei);
        w.push(wr.random::<f64>() < ei);
        let z: f64 = er.sample(StandardNormal);
        noise.push(dgp.noise_sd * z);
    }
    let mut b = DatasetBuilder::new();
    for j in 0..p {
        b = b.continuous(&format!("x{}", j + 1), x.column(j).into_iter().map(F::lit).collect());
    }
    finish(b, w, f, tau, e, noise, None)
}

/// Named DGPs used by the tests and the `simulate` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    RandomizedConstant,
    ConfoundedLinear,
    WrongOutcomeModel,
    WrongPropensityModel,
    HeterogeneousMonotone,
    /// Heterogeneous design with `tau = 1 + 2 x1`.
    LinearEffect,
    /// Noiseless randomized design with `tau = 1{x1 > 0}`.
    StepEffect,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::RandomizedConstant,
        Preset::ConfoundedLinear,
        Preset::WrongOutcomeModel,
        Preset::WrongPropensityModel,
        Preset::HeterogeneousMonotone,
        Preset::LinearEffect,
        Preset::StepEffect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::RandomizedConstant => "randomized-constant",
            Preset::ConfoundedLinear => "confounded-linear",
            Preset::WrongOutcomeModel => "wrong-outcome-model",
            Preset::WrongPropensityModel => "wrong-propensity-model",
            Preset::HeterogeneousMonotone => "heterogeneous-monotone",
            Preset::LinearEffect => "linear-effect",
            Preset::StepEffect => "step-effect",
        }
    }

    pub fn dgp(self, n: usize, seed: u64) -> SyntheticDgp {
        let logit_x1 = Propensity::Logistic {
            intercept: 0.0,
            coef: vec![1.0],
        };
        let half = Effect::Constant { tau: 0.5 };
        let base = |p, covariates, baseline, propensity, effect, noise_sd| SyntheticDgp {
            n,
            p,
            covariates,
            baseline,
            propensity,
            effect,
            noise_sd,
            seed,
        };
        let heterogeneous = |effect| {
            base(
                10,
                CovariateLaw::Uniform,
                Baseline::Linear {
                    coef: vec![0.0, 1.0, 0.5],
                },
                Propensity::Logistic {
                    intercept: 0.0,
                    coef: vec![0.0, 0.5],
                },
                effect,
                1.0,
            )
        };
        match self {
            Preset::RandomizedConstant => base(
                5,
                CovariateLaw::Normal,
                Baseline::Linear { coef: vec![1.0, 0.5] },
                Propensity::Constant { p: 0.5 },
                half,
                1.0,
            ),
            Preset::ConfoundedLinear => base(
                5,
                CovariateLaw::Normal,
                Baseline::Linear { coef: vec![1.0] },
                logit_x1,
                half,
                1.0,
            ),
            Preset::WrongOutcomeModel => base(
                5,
                CovariateLaw::Uniform,
                Baseline::Sine {
                    feature: 0,
                    amplitude: 1.5,
                    frequency: 3.0,
                },
                Propensity::Logistic {
                    intercept: 0.0,
                    coef: vec![3.0],
                },
                half,
                0.5,
            ),
            Preset::WrongPropensityModel => base(
                5,
                CovariateLaw::Normal,
                Baseline::Linear { coef: vec![1.0, 1.0] },
                Propensity::LogisticSine {
                    feature: 0,
                    amplitude: 3.0,
                    frequency: 2.0,
                },
                half,
                1.0,
            ),
            Preset::HeterogeneousMonotone => heterogeneous(Effect::Linear {
                intercept: 0.0,
                coef: vec![1.0],
            }),
            Preset::LinearEffect => heterogeneous(Effect::Linear {
                intercept: 1.0,
                coef: vec![2.0],
            }),
            Preset::StepEffect => base(
                5,
                CovariateLaw::Normal,
                Baseline::Zero,
                Propensity::Constant { p: 0.5 },
                Effect::Step {
                    feature: 0,
                    threshold: 0.0,
                    low: 0.0,
                    high: 1.0,
                },
                0.0,
            ),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown preset `{s}`")))
    }
}

/// Effect surface of the survey-like generator: `intercept + income_slope * income`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmEffect {
    pub intercept: f64,
    pub income_slope: f64,
}

impl Default for SsmEffect {
    fn default() -> Self {
        Self {
            intercept: 0.19,
            income_slope: -0.12,
        }
    }
}

pub const SSM_TREATED_SHARE: f64 = 0.097;
const SSM_MALE: f64 = 0.456;
const SSM_PRIVATE_SCHOOL: f64 = 0.045;
// Underlying normal whose truncation to [20, 80] has mean 52.97, sd 16.16.
const SSM_AGE_MU: f64 = 61.3486;
const SSM_AGE_SD: f64 = 31.7647;
const SSM_SIBLINGS: [f64; 4] = [0.0842, 0.2642, 0.3871, 0.2646];
const SSM_SCORE: [f64; 5] = [0.0549, 0.1984, 0.3445, 0.2872, 0.1150];
const SSM_EDU: [f64; 5] = [0.0723, 0.2410, 0.3633, 0.2474, 0.0761];
const SSM_JOB: [f64; 8] = [0.0525, 0.0925, 0.1375, 0.1724, 0.1823, 0.1627, 0.1224, 0.0777];
const SSM_NOISE_SD: f64 = 0.98;
pub const SSM_PREFECTURES: usize = 47;

/// Tutoring rate of each prefecture (JIS codes 1..=47), averaging 0.097.
pub fn ssm_prefecture_rates() -> [f64; SSM_PREFECTURES] {
    let fixed: [(usize, f64); 12] = [
        (2, 0.030),
        (3, 0.022),
        (5, 0.028),
        (11, 0.155),
        (12, 0.150),
        (13, 0.188),
        (14, 0.180),
        (23, 0.104),
        (26, 0.160),
        (27, 0.160),
        (28, 0.150),
        (29, 0.150),
    ];
    let mut rates = [f64::NAN; SSM_PREFECTURES];
    for &(code, r) in &fixed {
        rates[code - 1] = r;
    }
    let free: Vec<usize> = (1..=SSM_PREFECTURES).filter(|c| rates[c - 1].is_nan()).collect();
    let last = (free.len() - 1) as f64;
    for (k, &code) in free.iter().enumerate() {
        // scatter an even grid on [0.045, 0.132] over the remaining codes
        let r = (k * 17) % free.len();
        rates[code - 1] = 0.045 + 0.087 * r as f64 / last;
    }
    rates
}

fn categorical_draw(rng: &mut StreamRng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Ordinal level of a standard normal latent, cut at the quantiles of `probs`.
fn ordinal_from_latent(latent: f64, probs: &[f64], std_normal: &Normal) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs[..probs.len() - 1].iter().enumerate() {
        acc += p;
        if latent <= std_normal.inverse_cdf(acc) {
            return k;
        }
    }
    probs.len() - 1
}

fn ordinal_moments(levels: impl Iterator<Item = f64>, probs: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = levels.collect();
    let mean: f64 = vals.iter().zip(probs).map(|(v, p)| v * p).sum();
    let var: f64 = vals.iter().zip(probs).map(|(v, p)| p * (v - mean).powi(2)).sum();
    (mean, var.sqrt())
}

/// Survey-shaped sample: demographics, school background, parental status,
/// age cohort and prefecture, private tutoring as treatment and the
/// intergenerational change in educational attainment as outcome.
pub fn gen_ssm_like<F: Real>(n: usize, seed: u64, effect: SsmEffect) -> Result<(Dataset<F>, Truth<F>)> {
    if n < 100 {
        return Err(Error::Invalid(format!("survey-like sample needs n >= 100, got {n}")));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = stream(seed, "ssm-covariates", 0);
    let rho = |r: f64, z: f64, rng: &mut StreamRng| {
        let u: f64 = rng.sample(StandardNormal);
        r * z + (1.0 - r * r).sqrt() * u
    };

    let (mut male, mut age, mut sib, mut private, mut score) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut inc, mut edu, mut job, mut cohort, mut pref) = (vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        inc.push(z);
        male.push(f64::from(u8::from(rng.random::<f64>() < SSM_MALE)));
        let a = loop {
            let v: f64 = SSM_AGE_MU + SSM_AGE_SD * rng.sample::<f64, _>(StandardNormal);
            if (20.0..=80.0).contains(&v) {
                break v.round();
            }
        };
        age.push(a);
        cohort.push(age_cohort(SURVEY_YEAR - a as i32, &DEFAULT_COHORTS).expect("age within cohorts"));
        sib.push(categorical_draw(&mut rng, &SSM_SIBLINGS) as f64);
        private.push(f64::from(u8::from(rng.random::<f64>() < SSM_PRIVATE_SCHOOL)));
        score.push(1.0 + ordinal_from_latent(rho(0.3, z, &mut rng), &SSM_SCORE, &std_normal) as f64);
        edu.push(1.0 + ordinal_from_latent(rho(0.5, z, &mut rng), &SSM_EDU, &std_normal) as f64);
        job.push(ordinal_from_latent(rho(0.5, z, &mut rng), &SSM_JOB, &std_normal) as f64);
        pref.push(rng.random_range(1..=SSM_PREFECTURES));
    }

    let (edu_m, edu_s) = ordinal_moments((1..=5).map(f64::from), &SSM_EDU);
    let (score_m, score_s) = ordinal_moments((1..=5).map(f64::from), &SSM_SCORE);
    let edu_std: Vec<f64> = edu.iter().map(|v| (v - edu_m) / edu_s).collect();
    let score_std: Vec<f64> = score.iter().map(|v| (v - score_m) / score_s).collect();

    // Individual part of the tutoring logit; each prefecture then gets the
    // offset that makes its mean propensity equal its target rate.
    let g: Vec<f64> = (0..n)
        .map(|i| 0.4 * inc[i] + 0.3 * edu_std[i] + 0.2 * score_std[i] + 0.3 * private[i])
        .collect();
    let rates = ssm_prefecture_rates();
    let mut e = vec![0.0; n];
    for code in 1..=SSM_PREFECTURES {
        let members: Vec<usize> = (0..n).filter(|&i| pref[i] == code).collect();
        if members.is_empty() {
            continue;
        }
        let mean_e = |c: f64| {
            members
                .iter()
                .map(|&i| logistic(c + g[i]).clamp(PROPENSITY_BOUNDS.0, PROPENSITY_BOUNDS.1))
                .sum::<f64>()
                / members.len() as f64
        };
        let target = rates[code - 1];
        let (mut lo, mut hi) = (-20.0, 20.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if mean_e(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c = 0.5 * (lo + hi);
        for &i in &members {
            e[i] = logistic(c + g[i]).clamp(PROPENSITY_BOUNDS.0, PROPENSITY_BOUNDS.1);
        }
    }

    let mut wr = stream(seed, "ssm-treatment", 0);
    let mut er = stream(seed, "ssm-noise", 0);
    let mut sr = stream(seed, "ssm-weights", 0);
    let treatment: Vec<bool> = e.iter().map(|&p| wr.random::<f64>() < p).collect();
    let noise: Vec<f64> = (0..n)
        .map(|_| SSM_NOISE_SD * er.sample::<f64, _>(StandardNormal))
        .collect();
    let raw_w: Vec<f64> = (0..n)
        .map(|_| (0.25 * sr.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let mean_w = raw_w.iter().sum::<f64>() / n as f64;
    let weights: Vec<F> = raw_w.iter().map(|w| F::lit(w / mean_w)).collect();

    let tau: Vec<f64> = inc
        .iter()
        .map(|z| effect.intercept + effect.income_slope * z)
        .collect();
    let f: Vec<f64> = (0..n)
        .map(|i| -0.6 * edu_std[i] + 0.25 * score_std[i] + 0.15 * inc[i] + 0.1 * male[i] - 0.064)
        .collect();

    let lit = |v: &[f64]| v.iter().map(|&x| F::lit(x)).collect::<Vec<F>>();
    let labels = |v: &[usize]| v.iter().map(|c| Some(c.to_string())).collect::<Vec<_>>();
    let b = DatasetBuilder::new()
        .numeric("male", ColumnKind::Binary, lit(&male))
        .continuous("age", lit(&age))
        .ordinal("siblings", lit(&sib))
        .numeric("private_school", ColumnKind::Binary, lit(&private))
        .ordinal("score", lit(&score))
        .continuous("inc_p", lit(&inc))
        .ordinal("edu_p", lit(&edu))
        .ordinal("job_p", lit(&job))
        .categorical("age_group", &labels(&cohort))
        .categorical("prefecture", &labels(&pref));
    let b = b.roles(crate::dataset::Roles {
        treatment: "tutoring".into(),
        outcome: "it_edu".into(),
        weight: Some("weight".into()),
    });
    finish(b, treatment, f, tau, e, noise, Some(weights))
}

/// Blanks a `rate` share of the cells in `columns` completely at random.
/// One-hot groups are blanked as a unit.
pub fn mask_mcar<F: Real>(ds: &Dataset<F>, columns: &[&str], rate: f64, seed: u64) -> Result<Dataset<F>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &name in columns {
        let members: Vec<usize> = ds
            .column_kinds()
            .iter()
            .enumerate()
            .filter(|(j, k)| {
                ds.column_names()[*j] == name
                    || matches!(k, ColumnKind::OneHot { source, .. } if source == name)
            })
            .map(|(j, _)| j)
            .collect();
        if members.is_empty() {
            return Err(Error::Invalid(format!("no column `{name}` to mask")));
        }
        groups.push(members);
    }
    let mut rng = stream(seed, "mcar", 0);
    let mut x = ds.covariates().clone();
    for i in 0..ds.n() {
        for g in &groups {
            if rng.random::<f64>() < rate {
                for &j in g {
                    x[(i, j)] = F::nan();
                }
            }
        }
    }
    let mut out = Dataset::with_kinds(
        x,
        ds.treatment().to_vec(),
        ds.outcome().to_vec(),
        Some(ds.weights().to_vec()),
        ds.column_names().to_vec(),
        ds.column_kinds().to_vec(),
    )?;
    out.set_roles(ds.roles().clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_names() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn zero_effect_truth() {
        let mut dgp = Preset::ConfoundedLinear.dgp(500, 3);
        dgp.effect = Effect::Constant { tau: 0.0 };
        let (_, t) = gen::<f64>(&dgp).unwrap();
        assert_eq!((t.ate_true, t.att_true), (0.0, 0.0));
    }

    #[test]
    fn decomposition_is_exact_and_reproducible() {
        let dgp = Preset::HeterogeneousMonotone.dgp(300, 11);
        let (ds, t) = gen::<f64>(&dgp).unwrap();
        for i in 0..ds.n() {
            let w = if ds.treatment()[i] { 1.0 } else { 0.0 };
            assert_eq!(ds.outcome()[i] - t.f[i] - w * t.tau[i], t.epsilon[i]);
            assert!(t.e[i] >= 0.02 && t.e[i] <= 0.98);
        }
        let (again, _) = gen::<f64>(&dgp).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn prefecture_rates_average_target() {
        let r = ssm_prefecture_rates();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        assert!((mean - SSM_TREATED_SHARE).abs() < 1e-3, "{mean}");
        assert_eq!(r[2], 0.022);
        assert_eq!(r[12], 0.188);
    }

    #[test]
    fn ssm_rejects_tiny_samples() {
        assert!(gen_ssm_like::<f64>(50, 1, SsmEffect::default()).is_err());
    }
}
