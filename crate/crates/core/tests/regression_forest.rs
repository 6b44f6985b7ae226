use hte_core::regression_forest::{draw_sample, rf_fit, rf_fit_with_samples, rf_predict, rf_predict_oob, ForestParams};
use hte_core::stats::pearson;
use hte_core::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

fn uniform_design(n: usize, p: usize, lo: f64, hi: f64, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(n, p, (0..n * p).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn params(num_trees: usize, seed: u64) -> ForestParams {
    ForestParams {
        num_trees,
        seed,
        ..ForestParams::default()
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

#[test]
fn constant_response_is_reproduced() {
    let x = uniform_design(300, 3, -1.0, 1.0, 1);
    let y = vec![2.5; 300];
    let f = rf_fit(&x, &y, &params(50, 3), None).unwrap();
    assert!(rf_predict_oob(&f).iter().all(|v| (v - 2.5).abs() < 1e-12));
    assert!(rf_predict(&f, &x).unwrap().iter().all(|v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn step_function_has_small_oob_error() {
    let x = uniform_design(4000, 1, -1.0, 1.0, 2);
    let y: Vec<f64> = (0..4000).map(|i| if x[(i, 0)] > 0.0 { 1.0 } else { 0.0 }).collect();
    let f = rf_fit(&x, &y, &params(200, 5), None).unwrap();
    let err = mse(rf_predict_oob(&f), &y);
    assert!(err < 0.05, "oob mse {err}");
}

#[test]
fn same_seed_same_forest() {
    let x = uniform_design(500, 4, -1.0, 1.0, 3);
    let y: Vec<f64> = (0..500).map(|i| x[(i, 0)] * x[(i, 1)]).collect();
    let a = rf_fit(&x, &y, &params(40, 9), None).unwrap();
    let b = rf_fit(&x, &y, &params(40, 9), None).unwrap();
    assert_eq!(a, b);
    let c = rf_fit(&x, &y, &params(40, 10), None).unwrap();
    assert_ne!(a.oob_predictions, c.oob_predictions);
}

#[test]
fn smooth_surface_oob_correlation() {
    let n = 5000;
    let x = uniform_design(n, 1, -3.0, 3.0, 4);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let truth: Vec<f64> = (0..n).map(|i| x[(i, 0)].sin()).collect();
    let y: Vec<f64> = truth.iter().map(|t| t + noise.sample(&mut rng)).collect();
    let f = rf_fit(&x, &y, &params(200, 1), None).unwrap();
    let r = pearson(rf_predict_oob(&f), &truth);
    assert!(r > 0.9, "corr {r}");
}

#[test]
fn oob_error_exceeds_in_sample_error_on_average() {
    let reps = 500;
    let gaps: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let n = 200;
            let x = uniform_design(n, 2, -1.0, 1.0, 1000 + rep);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(rep);
            let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] + noise.sample(&mut rng)).collect();
            let f = rf_fit(&x, &y, &params(20, rep), None).unwrap();
            mse(rf_predict_oob(&f), &y) - mse(&rf_predict(&f, &x).unwrap(), &y)
        })
        .collect();
    let avg = gaps.iter().sum::<f64>() / reps as f64;
    assert!(avg > 0.0, "average optimism gap {avg}");
}

#[test]
fn permuting_rows_with_fixed_samples_changes_nothing() {
    let n = 400;
    let x = uniform_design(n, 3, -1.0, 1.0, 6);
    let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] + 0.5 * x[(i, 2)].powi(2)).collect();
    let p = params(25, 8);
    let samples: Vec<_> = (0..p.num_trees).map(|b| draw_sample(n, 0.5, true, 8, "test", b)).collect();
    let a = rf_fit_with_samples(&x, &y, &p, None, &samples).unwrap();

    // new row k holds old row perm[k]
    let perm: Vec<usize> = (0..n).map(|k| (k * 7 + 3) % n).collect();
    let mut inverse = vec![0; n];
    for (k, &old) in perm.iter().enumerate() {
        inverse[old] = k;
    }
    let xp = Matrix::from_rows(&perm.iter().map(|&old| x.row(old).to_vec()).collect::<Vec<_>>()).unwrap();
    let yp: Vec<f64> = perm.iter().map(|&old| y[old]).collect();
    let moved: Vec<_> = samples
        .iter()
        .map(|(s, e)| {
            (
                s.iter().map(|&r| inverse[r]).collect(),
                e.iter().map(|&r| inverse[r]).collect(),
            )
        })
        .collect();
    let b = rf_fit_with_samples(&xp, &yp, &p, None, &moved).unwrap();
    for old in 0..n {
        assert_eq!(a.oob_predictions[old], b.oob_predictions[inverse[old]]);
    }
}

#[test]
fn treatment_as_response_stays_in_unit_interval() {
    let n = 1000;
    let x = uniform_design(n, 2, -2.0, 2.0, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let e = 1.0 / (1.0 + (-x[(i, 0)]).exp());
            if rng.random::<f64>() < e {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let f = rf_fit(&x, &w, &params(100, 2), None).unwrap();
    assert!(rf_predict_oob(&f).iter().all(|e| (0.0..=1.0).contains(e)));
    let grid = uniform_design(200, 2, -5.0, 5.0, 71);
    assert!(rf_predict(&f, &grid).unwrap().iter().all(|e| (0.0..=1.0).contains(e)));
}

#[test]
fn weights_enter_leaf_means() {
    let n = 200;
    let x = Matrix::from_vec(n, 1, vec![0.0; n]).unwrap();
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let w: Vec<f64> = (0..n).map(|i| if i % 2 == 1 { 3.0 } else { 1.0 }).collect();
    let f = rf_fit(&x, &y, &params(30, 1), Some(&w)).unwrap();
    let pred = rf_predict(&f, &x).unwrap()[0];
    assert!((pred - 0.75).abs() < 0.1, "{pred}");
}

#[test]
fn predict_checks_width() {
    let x = uniform_design(100, 2, 0.0, 1.0, 1);
    let f = rf_fit(&x, &[1.0; 100], &params(5, 1), None).unwrap();
    assert!(rf_predict(&f, &uniform_design(3, 5, 0.0, 1.0, 2)).is_err());
}

#[test]
fn f32_forest_fits() {
    let x = Matrix::from_vec(200, 1, (0..200).map(|i| i as f32 / 200.0).collect()).unwrap();
    let y: Vec<f32> = (0..200).map(|i| if i < 100 { 0.0 } else { 1.0 }).collect();
    let f = rf_fit(&x, &y, &params(50, 1), None).unwrap();
    let oob = rf_predict_oob(&f);
    assert!(oob[10] < 0.2 && oob[190] > 0.8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_are_convex_combinations(
        seed in 0u64..1000,
        ys in prop::collection::vec(-50.0f64..50.0, 40..120),
    ) {
        let n = ys.len();
        let x = uniform_design(n, 2, -1.0, 1.0, seed);
        let f = rf_fit(&x, &ys, &params(10, seed), None).unwrap();
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
        let query = uniform_design(30, 2, -3.0, 3.0, seed + 1);
        for v in rf_predict(&f, &query).unwrap().into_iter().chain(f.oob_predictions.iter().copied()) {
            prop_assert!(v >= lo && v <= hi);
        }
    }

    #[test]
    fn leaves_hold_min_leaf_estimation_rows(seed in 0u64..1000, min_leaf in 1usize..12) {
        let x = uniform_design(150, 2, -1.0, 1.0, seed);
        let y: Vec<f64> = (0..150).map(|i| x[(i, 0)]).collect();
        let p = ForestParams { min_leaf, ..params(5, seed) };
        let f = rf_fit(&x, &y, &p, None).unwrap();
        for t in &f.trees {
            for leaf in t.tree.leaves() {
                prop_assert!(t.tree.est_rows_of(leaf).len() >= min_leaf);
                prop_assert!(t.tree.split_rows_of(leaf).len() >= min_leaf);
            }
        }
    }
}
