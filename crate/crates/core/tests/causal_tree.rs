use hte_core::causal_tree::{ct_cv_table, ct_fit, ct_predict, ct_prune, CausalTreeParams};
use hte_core::synth::{gen, Preset};
use hte_core::{Dataset64, Matrix};
use rayon::prelude::*;

fn step(n: usize, seed: u64) -> Dataset64 {
    gen::<f64>(&Preset::StepEffect.dgp(n, seed)).unwrap().0
}

/// Covariates replaced column-wise by `f(j, value)`.
fn remap(ds: &Dataset64, f: impl Fn(usize, f64) -> f64) -> Dataset64 {
    let x = ds.covariates();
    let mut m = Matrix::zeros(x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            m[(i, j)] = f(j, x[(i, j)]);
        }
    }
    Dataset64::new(
        m,
        ds.treatment().to_vec(),
        ds.outcome().to_vec(),
        Some(ds.weights().to_vec()),
        ds.column_names().to_vec(),
    )
    .unwrap()
}

#[test]
fn planted_split_is_recovered() {
    let ds = step(2000, 11);
    let t = ct_fit(&ds, &CausalTreeParams::default(), 5).unwrap();
    let root = t.tree.nodes[0].split.expect("root splits");
    assert_eq!(root.feature, 0);
    assert!(root.threshold.abs() <= 0.1, "threshold {}", root.threshold);
    for leaf in t.tree.leaves() {
        let tau = t.stats[leaf].tau;
        assert!(tau.abs() <= 0.1 || (tau - 1.0).abs() <= 0.1, "leaf effect {tau}");
    }
    let q = Matrix::from_rows(&[vec![-1.0, 0.3, 0.0, 0.0, 0.0], vec![1.0, -0.3, 0.0, 0.0, 0.0]]).unwrap();
    let pred = ct_predict(&t, &q).unwrap();
    assert!(pred[0].abs() <= 0.1 && (pred[1] - 1.0).abs() <= 0.1, "{pred:?}");
    assert!(ct_predict(&t, &Matrix::zeros(1, 3)).is_err());
}

#[test]
fn constant_effect_collapses_to_root() {
    let roots = (0..100u64)
        .into_par_iter()
        .filter(|&s| {
            let (ds, _) = gen::<f64>(&Preset::RandomizedConstant.dgp(1000, 1000 + s)).unwrap();
            let t = ct_fit(&ds, &CausalTreeParams::default(), s).unwrap();
            t.tree.nodes.len() == 1
        })
        .count();
    println!("collapsed to root in {roots}/100 seeds");
    assert!(roots >= 80, "{roots}");
}

#[test]
fn binding_minimums_prevent_any_split() {
    let ds = step(60, 2);
    let params = CausalTreeParams {
        min_treated: 25,
        min_control: 25,
        ..Default::default()
    };
    let t = ct_fit(&ds, &params, 1).unwrap();
    assert_eq!(t.tree.nodes.len(), 1);
}

#[test]
fn leaves_respect_arm_minimums_and_honesty() {
    let (ds, _) = gen::<f64>(&Preset::LinearEffect.dgp(3000, 4)).unwrap();
    let t = ct_fit(&ds, &CausalTreeParams::default(), 9).unwrap();
    assert!(t.tree.num_leaves() > 1);
    let split: std::collections::HashSet<_> = t.split_sample_ids.iter().collect();
    assert!(t.est_sample_ids.iter().all(|r| !split.contains(r)));
    assert_eq!(t.split_sample_ids.len() + t.est_sample_ids.len(), ds.n());

    let (y, w) = (ds.outcome(), ds.treatment());
    let mut owner = vec![usize::MAX; ds.n()];
    for leaf in t.tree.leaves() {
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
        for &r in t.tree.est_rows_of(leaf) {
            assert_eq!(owner[r], usize::MAX);
            owner[r] = leaf;
            if w[r] {
                s1 += y[r];
                n1 += 1.0;
            } else {
                s0 += y[r];
                n0 += 1.0;
            }
        }
        let st = t.stats[leaf];
        assert!(st.n_treated >= 10 && st.n_control >= 10);
        assert!((st.tau - (s1 / n1 - s0 / n0)).abs() < 1e-12);
    }
    assert!(t.est_sample_ids.iter().all(|&r| owner[r] != usize::MAX));
    for &r in &t.est_sample_ids {
        assert_eq!(t.tree.leaf_of(ds.covariates().row(r)), owner[r]);
    }
}

#[test]
fn monotone_transform_keeps_the_partition() {
    let (ds, _) = gen::<f64>(&Preset::LinearEffect.dgp(2000, 8)).unwrap();
    let warped = remap(&ds, |j, v| if j == 0 { v.powi(3) + 2.0 * v } else { v });
    let a = ct_fit(&ds, &CausalTreeParams::default(), 3).unwrap();
    let b = ct_fit(&warped, &CausalTreeParams::default(), 3).unwrap();
    assert_eq!(a.tree.nodes.len(), b.tree.nodes.len());
    for k in 0..a.tree.nodes.len() {
        let (na, nb) = (&a.tree.nodes[k], &b.tree.nodes[k]);
        assert_eq!(na.split.map(|s| s.feature), nb.split.map(|s| s.feature));
        let mut ra = a.tree.split_rows_of(k).to_vec();
        let mut rb = b.tree.split_rows_of(k).to_vec();
        ra.sort_unstable();
        rb.sort_unstable();
        assert_eq!(ra, rb);
    }
}

#[test]
fn appended_noise_split_is_pruned() {
    let ds = step(2000, 6);
    let mut t = ct_fit(&ds, &CausalTreeParams::default(), 2).unwrap();
    let before = t.tree.num_leaves();
    let leaf = t.tree.leaves().max_by_key(|&l| t.tree.est_rows_of(l).len()).unwrap();
    t.split_leaf(&ds, leaf, 3, 0.0);
    assert_eq!(t.tree.num_leaves(), before + 1);
    let table = ct_cv_table(&t, &ds).unwrap();
    let pruned = ct_prune(&t, &table, &ds);
    assert_eq!(pruned.tree.num_leaves(), before);
    assert!(pruned.tree.num_leaves() <= t.tree.num_leaves());
    assert_eq!(pruned.tree.nodes[0].split.map(|s| s.feature), Some(0));
}

#[test]
fn prediction_ignores_unused_features() {
    let ds = step(2000, 12);
    let t = ct_fit(&ds, &CausalTreeParams::default(), 1).unwrap();
    let used: Vec<usize> = t.tree.nodes.iter().filter_map(|n| n.split.map(|s| s.feature)).collect();
    let x = ds.covariates();
    let shuffled = remap(&ds, |j, v| if used.contains(&j) { v } else { -7.0 * v + 3.0 });
    assert_eq!(ct_predict(&t, x).unwrap(), ct_predict(&t, shuffled.covariates()).unwrap());
    let pred = ct_predict(&t, x).unwrap();
    for leaf in t.tree.leaves() {
        for &r in t.tree.est_rows_of(leaf) {
            assert_eq!(pred[r], t.stats[leaf].tau);
        }
    }
}

#[test]
fn tree_serializes_with_leaf_stats() {
    let ds = step(1000, 3);
    let t = ct_fit(&ds, &CausalTreeParams::default(), 1).unwrap();
    let v = t.to_json();
    let nodes = v["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), t.tree.nodes.len());
    assert_eq!(nodes[0]["feature"], "x1");
    assert!(nodes.iter().all(|n| n["n_treated"].as_u64().is_some()));
    let round: hte_core::CausalTree64 = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
    assert_eq!(round, t);
}

#[test]
fn fit_is_deterministic() {
    let (ds, _) = gen::<f64>(&Preset::LinearEffect.dgp(1500, 1)).unwrap();
    let a = ct_fit(&ds, &CausalTreeParams::default(), 4).unwrap();
    let b = ct_fit(&ds, &CausalTreeParams::default(), 4).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
