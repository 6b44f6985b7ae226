use std::sync::OnceLock;

use hte_core::causal_forest::{
    blp_from_scores, calibration_from_scores, cf_ate, cf_best_linear_projection, cf_fit, cf_predict, cf_rank_ate,
    cf_subgroup_cate, cf_test_calibration, cf_variable_importance, fit_with_nuisances, forest_weights,
    quantile_labels, rank_from_scores, CausalForestParams, RANK_FOLDS,
};
use hte_core::estimators::{naive_diff, Target};
use hte_core::stats::{mean, pearson, spearman};
use hte_core::synth::{gen, gen_ssm_like, Baseline, CovariateLaw, Effect, Preset, Propensity, SsmEffect, SyntheticDgp};
use hte_core::{CausalForest64, Dataset64, Matrix};
use rand::Rng;
use rayon::prelude::*;

fn params(num_trees: usize) -> CausalForestParams {
    CausalForestParams {
        num_trees,
        ..Default::default()
    }
}

fn column(ds: &Dataset64, j: usize) -> Vec<f64> {
    ds.covariates().column(j)
}

fn monotone() -> &'static (Dataset64, CausalForest64) {
    static FIT: OnceLock<(Dataset64, CausalForest64)> = OnceLock::new();
    FIT.get_or_init(|| {
        let (ds, _) = gen::<f64>(&Preset::HeterogeneousMonotone.dgp(5000, 21)).unwrap();
        let f = cf_fit(&ds, &params(500), 3).unwrap();
        (ds, f)
    })
}

#[test]
fn randomized_constant_effect_is_recovered() {
    let (ds, _) = gen::<f64>(&Preset::RandomizedConstant.dgp(5000, 2)).unwrap();
    let f = cf_fit(&ds, &params(300), 1).unwrap();
    let m = mean(&f.oob_tau);
    assert!((m - 0.5).abs() <= 0.05, "mean oob tau {m}");
}

#[test]
fn monotone_effect_is_tracked() {
    let (ds, f) = monotone();
    let x1 = column(ds, 0);
    let r = pearson(&f.oob_tau, &x1);
    let rho = spearman(&f.oob_tau, &x1);
    assert!(r > 0.8, "pearson {r}");
    assert!(rho > 0.75, "spearman {rho}");
    assert!(f.oob_uncovered.is_empty());
}

#[test]
fn confounded_effect_is_recovered_while_naive_is_biased() {
    let (ds, truth) = gen::<f64>(&Preset::ConfoundedLinear.dgp(5000, 5)).unwrap();
    let f = cf_fit(&ds, &params(300), 2).unwrap();
    let m = mean(&f.oob_tau);
    assert!((m - 0.5).abs() <= 0.07, "mean oob tau {m}");
    let naive = naive_diff(&ds).unwrap().estimate - truth.ate_true;
    assert!(naive > 0.5, "naive bias {naive}");
}

#[test]
fn single_leaf_forest_returns_the_leaf_slope() {
    let (ds, _) = gen::<f64>(&Preset::LinearEffect.dgp(400, 3)).unwrap();
    let p = CausalForestParams {
        num_trees: 1,
        max_depth: Some(0),
        ..Default::default()
    };
    let f = cf_fit(&ds, &p, 4).unwrap();
    let t = &f.trees[0];
    let (mut num, mut den) = (0.0, 0.0);
    for &r in t.tree.est_rows_of(0) {
        num += f.w_res[r] * f.y_res[r];
        den += f.w_res[r] * f.w_res[r];
    }
    let slope = num / den;
    let pred = cf_predict(&f, ds.covariates()).unwrap();
    assert!(pred.iter().all(|v| (v - slope).abs() < 1e-12));
    assert!(cf_variable_importance(&f).iter().all(|&v| v == 0.0));
}

#[test]
fn prediction_matches_explicit_weights() {
    let (ds, _) = gen::<f64>(&Preset::HeterogeneousMonotone.dgp(200, 7)).unwrap();
    let f = cf_fit(&ds, &params(50), 8).unwrap();
    let x = ds.covariates();
    let pred = cf_predict(&f, x).unwrap();
    for i in 0..ds.n() {
        let alpha = forest_weights(&f, x.row(i), None);
        let total: f64 = alpha.iter().map(|a| a.1).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(alpha.iter().all(|a| a.1 >= 0.0));
        let num: f64 = alpha.iter().map(|&(r, a)| a * f.w_res[r] * f.y_res[r]).sum();
        let den: f64 = alpha.iter().map(|&(r, a)| a * f.w_res[r] * f.w_res[r]).sum();
        assert!((pred[i] - num / den).abs() < 1e-10, "row {i}");

        let oob = forest_weights(&f, x.row(i), Some(i));
        let num: f64 = oob.iter().map(|&(r, a)| a * f.w_res[r] * f.y_res[r]).sum();
        let den: f64 = oob.iter().map(|&(r, a)| a * f.w_res[r] * f.w_res[r]).sum();
        assert!((f.oob_tau[i] - num / den).abs() < 1e-10, "oob row {i}");
    }
}

#[test]
fn noiseless_randomized_design_is_exact() {
    let dgp = SyntheticDgp {
        baseline: Baseline::Zero,
        noise_sd: 0.0,
        ..Preset::RandomizedConstant.dgp(600, 9)
    };
    let (ds, _) = gen::<f64>(&dgp).unwrap();
    let f = fit_with_nuisances(&ds, &params(50), 1, vec![0.25; 600], vec![0.5; 600]).unwrap();
    assert!(f.oob_tau.iter().all(|t| (t - 0.5).abs() < 1e-12));
    let ate = cf_ate(&f, Target::All).unwrap();
    assert!((ate.estimate - 0.5).abs() < 1e-12);
}

#[test]
fn selection_on_gains_gives_smaller_att() {
    let dgp = SyntheticDgp {
        n: 5000,
        p: 5,
        covariates: CovariateLaw::Normal,
        baseline: Baseline::Linear { coef: vec![0.5] },
        propensity: Propensity::Logistic {
            intercept: -0.5,
            coef: vec![1.0],
        },
        effect: Effect::Linear {
            intercept: 1.0,
            coef: vec![-1.0],
        },
        noise_sd: 1.0,
        seed: 11,
    };
    let (ds, truth) = gen::<f64>(&dgp).unwrap();
    assert!(truth.att_true < truth.ate_true);
    let f = cf_fit(&ds, &params(300), 5).unwrap();
    let ate = cf_ate(&f, Target::All).unwrap();
    let att = cf_ate(&f, Target::Treated).unwrap();
    assert!(att.estimate < ate.estimate, "att {} ate {}", att.estimate, ate.estimate);
    assert!(att.covers(truth.att_true) && ate.covers(truth.ate_true));
}

#[test]
fn planted_driver_ranks_first_in_importance() {
    let firsts = (0..50u64)
        .into_par_iter()
        .filter(|&s| {
            let (ds, _) = gen::<f64>(&Preset::HeterogeneousMonotone.dgp(2000, 500 + s)).unwrap();
            let f = cf_fit(&ds, &params(100), s).unwrap();
            let imp = cf_variable_importance(&f);
            let total: f64 = imp.iter().sum();
            assert!((total - 1.0).abs() < 1e-12 && imp.iter().all(|&v| v >= 0.0));
            (1..imp.len()).all(|j| imp[0] > imp[j])
        })
        .count();
    println!("x1 ranked first in {firsts}/50 seeds");
    assert!(firsts >= 48, "{firsts}");
}

#[test]
fn subgroup_effects_fall_with_income() {
    let (ds, _) = gen_ssm_like::<f64>(7817, 3, SsmEffect::default()).unwrap();
    let f = cf_fit(&ds, &params(200), 6).unwrap();
    let income = column(&ds, ds.column_index("inc_p").unwrap());
    let groups = cf_subgroup_cate(&f, &quantile_labels(&income, 5)).unwrap();
    assert_eq!(groups.iter().map(|g| g.group.as_str()).collect::<Vec<_>>(), ["Q1", "Q2", "Q3", "Q4", "Q5"]);
    let q1 = groups[0].report.as_ref().unwrap().estimate;
    let q5 = groups[4].report.as_ref().unwrap().estimate;
    assert!(q1 > q5, "Q1 {q1} Q5 {q5}");
}

#[test]
fn homogeneous_subgroup_intervals_overlap_the_ate() {
    let seeds = 20;
    let overlapping = (0..seeds as u64)
        .into_par_iter()
        .filter(|&s| {
            let (ds, _) = gen::<f64>(&Preset::RandomizedConstant.dgp(2000, 300 + s)).unwrap();
            let f = cf_fit(&ds, &params(100), s).unwrap();
            let ate = cf_ate(&f, Target::All).unwrap();
            let groups = cf_subgroup_cate(&f, &quantile_labels(&column(&ds, 0), 5)).unwrap();
            groups.iter().all(|g| {
                let r = g.report.as_ref().unwrap();
                r.ci_lo <= ate.ci_hi && ate.ci_lo <= r.ci_hi
            })
        })
        .count();
    assert!(overlapping * 10 >= seeds * 9, "{overlapping}/{seeds}");
}

#[test]
fn single_group_equals_the_ate() {
    let (ds, f) = monotone();
    let ate = cf_ate(f, Target::All).unwrap();
    let g = cf_subgroup_cate(f, &vec!["all".to_string(); ds.n()]).unwrap();
    assert_eq!(g.len(), 1);
    let r = g[0].report.as_ref().unwrap();
    assert!((r.estimate - ate.estimate).abs() < 1e-12);
    assert!((r.se - ate.se).abs() < 1e-12);
}

#[test]
fn single_arm_group_is_reported_missing() {
    let (ds, f) = monotone();
    let labels: Vec<String> = ds.treatment().iter().map(|&w| if w { "t" } else { "c" }.to_string()).collect();
    let g = cf_subgroup_cate(f, &labels).unwrap();
    assert!(g.iter().all(|g| g.report.is_none()));
    assert_eq!(g[0].reason.as_deref(), Some("no treated units"));
    assert_eq!(g[1].reason.as_deref(), Some("no control units"));
}

#[test]
fn ranking_is_monotone_and_averages_to_the_ate() {
    let (_, f) = monotone();
    let rank = cf_rank_ate(f, 5).unwrap();
    assert_eq!(rank.bins.len(), 5);
    let est: Vec<f64> = rank.bins.iter().map(|b| b.estimate).collect();
    for j in 1..5 {
        let (a, b) = (&rank.bins[j - 1], &rank.bins[j]);
        assert!(b.estimate > a.estimate || b.ci_hi >= a.ci_lo, "{est:?}");
    }
    assert!(est[4] > est[0]);
    assert!(rank.p_value.unwrap() < 0.01);
    let n: usize = rank.sizes.iter().sum();
    let pooled: f64 = est.iter().zip(&rank.sizes).map(|(e, &s)| e * s as f64).sum::<f64>() / n as f64;
    let ate = cf_ate(f, Target::All).unwrap();
    assert!((pooled - ate.estimate).abs() <= 2.0 * ate.se, "{pooled} vs {}", ate.estimate);
}

#[test]
fn ranking_test_is_calibrated_for_independent_rankings() {
    let rejections = (0..100u64)
        .into_par_iter()
        .filter(|&s| {
            let (ds, _) = gen::<f64>(&Preset::RandomizedConstant.dgp(1000, 700 + s)).unwrap();
            let f = cf_fit(&ds, &params(50), s).unwrap();
            let mut rng = hte_core::rng::stream(s, "ranking", 0);
            let tau: Vec<f64> = (0..ds.n()).map(|_| rng.random()).collect();
            let r = rank_from_scores(&f.scores().unwrap(), &tau, ds.weights(), 5, RANK_FOLDS).unwrap();
            r.p_value.is_some_and(|p| p < 0.05)
        })
        .count();
    assert!(rejections <= 10, "{rejections}/100");
}

// Out-of-bag rankings of the same sample reject a true null in about 10% of
// seeds at the 5% level: each unit's bin depends on its neighbours' noise,
// which the HC2 errors treat as independent.
#[test]
#[ignore = "known over-rejection of same-sample out-of-bag rankings"]
fn ranking_null_rejection_rate_with_forest_rankings() {
    let rejections = (0..100u64)
        .into_par_iter()
        .filter(|&s| {
            let (ds, _) = gen::<f64>(&Preset::RandomizedConstant.dgp(1000, 700 + s)).unwrap();
            let f = cf_fit(&ds, &params(50), s).unwrap();
            cf_rank_ate(&f, 5).unwrap().p_value.is_some_and(|p| p < 0.05)
        })
        .count();
    println!("null ranking rejected in {rejections}/100 seeds");
    assert!(rejections <= 10, "{rejections}");
}

#[test]
fn constant_effects_collapse_ranking_to_one_bin() {
    let scores = [0.1f64, 0.9, 0.4, 0.6];
    let r = hte_core::causal_forest::rank_from_scores(&scores, &[0.5; 4], &[1.0; 4], 5, 2).unwrap();
    assert!(r.fallback);
    assert_eq!(r.bins.len(), 1);
    assert!((r.bins[0].estimate - 0.5).abs() < 1e-12);
}

#[test]
fn calibration_of_exact_scores_and_flat_predictions() {
    let tau: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
    let c = calibration_from_scores(&tau, &tau, &[1.0; 50]).unwrap();
    let d = c.differential_forest_prediction.unwrap();
    assert!((c.mean_forest_prediction.estimate - 1.0).abs() < 1e-10 && (d.estimate - 1.0).abs() < 1e-10);
    assert!(c.mean_forest_prediction.se < 1e-10 && d.se < 1e-10);

    let flat = calibration_from_scores(&tau, &[0.7; 50], &[1.0; 50]).unwrap();
    assert!(flat.differential_forest_prediction.is_none());
}

#[test]
fn heterogeneous_calibration_detects_heterogeneity() {
    let (_, f) = monotone();
    let c = cf_test_calibration(f).unwrap();
    let d = c.differential_forest_prediction.unwrap();
    assert!(d.t > 2.0, "differential t {}", d.t);
    assert!((d.estimate - 1.0).abs() < 0.3, "differential {}", d.estimate);
}

#[test]
fn linear_projection_recovers_the_slope() {
    let (ds, _) = gen::<f64>(&Preset::LinearEffect.dgp(10000, 13)).unwrap();
    let f = cf_fit(&ds, &params(200), 2).unwrap();
    let a = ds.covariates().select_columns(&[0]);
    let rows = cf_best_linear_projection(&f, &a, &["x1".into()]).unwrap();
    assert_eq!(rows[0].name, "(Intercept)");
    assert!((rows[0].estimate - 1.0).abs() < 0.2, "intercept {}", rows[0].estimate);
    assert!((rows[1].estimate - 2.0).abs() <= 0.3, "slope {}", rows[1].estimate);
    let (lo, hi) = rows[1].ci();
    assert!(lo <= 2.0 && 2.0 <= hi);
}

#[test]
fn intercept_only_projection_is_the_ate() {
    let (ds, f) = monotone();
    let scores = f.scores().unwrap();
    let empty = Matrix::zeros(ds.n(), 0);
    let rows = blp_from_scores(&scores, ds.weights(), &empty, &[]).unwrap();
    assert_eq!(rows.len(), 1);
    let ate = cf_ate(f, Target::All).unwrap();
    assert!((rows[0].estimate - ate.estimate).abs() < 1e-10);
}

#[test]
fn scores_average_to_the_ate() {
    let (_, f) = monotone();
    let ate = cf_ate(f, Target::All).unwrap();
    assert!((mean(&f.scores().unwrap()) - ate.estimate).abs() < 1e-12);
}

/// Rounds to a multiple of 2^-20 so that the sums and differences below are exact.
fn dyadic(v: f64) -> f64 {
    (v * 1048576.0).round() / 1048576.0
}

/// Oracle nuisances on a dyadic grid, for a dataset whose outcomes are dyadic too.
fn dyadic_oracle(n: usize, seed: u64) -> (Dataset64, Vec<f64>, Vec<f64>) {
    let (ds, truth) = gen::<f64>(&Preset::HeterogeneousMonotone.dgp(n, seed)).unwrap();
    let ds = ds.with_outcome(ds.outcome().iter().map(|&y| dyadic(y)).collect()).unwrap();
    let e: Vec<f64> = truth.e.iter().map(|&e| dyadic(e)).collect();
    let m: Vec<f64> = (0..n).map(|i| dyadic(truth.f[i] + e[i] * truth.tau[i])).collect();
    (ds, m, e)
}

#[test]
fn outcome_shift_with_shifted_nuisance_leaves_effects_unchanged() {
    let (ds, m, e) = dyadic_oracle(1000, 17);
    let a = fit_with_nuisances(&ds, &params(50), 3, m.clone(), e.clone()).unwrap();
    let c = 16.0;
    let shifted = ds.with_outcome(ds.outcome().iter().map(|y| y + c).collect()).unwrap();
    let b = fit_with_nuisances(&shifted, &params(50), 3, m.iter().map(|v| v + c).collect(), e).unwrap();
    assert_eq!(a.y_res, b.y_res);
    for (x, y) in a.oob_tau.iter().zip(&b.oob_tau) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn swapping_treatment_labels_negates_effects() {
    let (ds, m, e) = dyadic_oracle(1000, 19);
    let a = fit_with_nuisances(&ds, &params(50), 3, m.clone(), e.clone()).unwrap();
    let flipped = ds.with_treatment(ds.treatment().iter().map(|w| !w).collect()).unwrap();
    let b = fit_with_nuisances(&flipped, &params(50), 3, m, e.iter().map(|v| 1.0 - v).collect()).unwrap();
    for (x, y) in a.oob_tau.iter().zip(&b.oob_tau) {
        assert!((x + y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (ds, _) = gen::<f64>(&Preset::HeterogeneousMonotone.dgp(800, 23)).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let f = cf_fit(&ds, &params(60), 5).unwrap();
            let ate = cf_ate(&f, Target::All).unwrap();
            (format!("{:?}", f.trees), f.oob_tau.clone(), serde_json::to_string(&ate).unwrap())
        })
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
}

#[test]
fn f32_forest_runs() {
    let (ds, _) = gen::<f32>(&Preset::HeterogeneousMonotone.dgp(1000, 29)).unwrap();
    let f = cf_fit(&ds, &params(50), 1).unwrap();
    let r = pearson(&f.oob_tau, &ds.covariates().column(0));
    assert!(r > 0.5, "{r}");
    assert!(cf_ate(&f, Target::All).unwrap().se > 0.0);
}

#[test]
fn rejects_single_arm_data() {
    let (ds, _) = gen::<f64>(&Preset::RandomizedConstant.dgp(200, 1)).unwrap();
    let treated = ds.with_treatment(vec![true; 200]).unwrap();
    assert!(cf_fit(&treated, &params(10), 1).is_err());
}
