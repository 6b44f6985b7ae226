use hte_core::dataset::ColumnKind;
use hte_core::stats::{mean, weighted_variance};
use hte_core::synth::{gen, gen_ssm_like, mask_mcar, Preset, SsmEffect};

fn integrate(f: impl Fn(f64) -> f64) -> f64 {
    // composite Simpson on [-10, 10]
    let (a, b, m) = (-10.0, 10.0, 20_000);
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for k in 1..m {
        let x = a + k as f64 * h;
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[test]
fn confounded_bias_matches_quadrature() {
    let e = |x: f64| (1.0 / (1.0 + (-x).exp())).clamp(0.02, 0.98);
    let p1 = integrate(|x| e(x) * phi(x));
    let m1 = integrate(|x| x * e(x) * phi(x)) / p1;
    let m0 = integrate(|x| x * (1.0 - e(x)) * phi(x)) / (1.0 - p1);
    let bias = m1 - m0;
    assert!((bias - 0.83).abs() < 0.01, "{bias}");

    let (ds, t) = gen::<f64>(&Preset::ConfoundedLinear.dgp(200_000, 4)).unwrap();
    assert_eq!(t.ate_true, 0.5);
    let x1 = ds.covariates().column(0);
    let (mut a, mut na, mut b, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for (x, &w) in x1.iter().zip(ds.treatment()) {
        if w {
            a += x;
            na += 1.0;
        } else {
            b += x;
            nb += 1.0;
        }
    }
    assert!((a / na - b / nb - bias).abs() < 0.02);
}

#[test]
fn overlap_and_moments_converge() {
    for preset in Preset::ALL {
        let (_, t) = gen::<f64>(&preset.dgp(2000, 8)).unwrap();
        assert!(t.e.iter().all(|&e| (0.02..=0.98).contains(&e)), "{preset}");
    }
    // error of the x1 mean shrinks roughly like 1/sqrt(n)
    let err = |n: usize| -> f64 {
        (0..20)
            .map(|s| {
                let (ds, _) = gen::<f64>(&Preset::RandomizedConstant.dgp(n, s)).unwrap();
                mean(&ds.covariates().column(0)).powi(2)
            })
            .sum::<f64>()
            / 20.0
    };
    let (small, large) = (err(1_000), err(10_000));
    assert!(small > 3.0 * large && small < 30.0 * large, "{small} {large}");
}

#[test]
fn f32_generation_keeps_exact_decomposition() {
    let (ds, t) = gen::<f32>(&Preset::WrongOutcomeModel.dgp(500, 2)).unwrap();
    for i in 0..ds.n() {
        let w = if ds.treatment()[i] { 1.0f32 } else { 0.0 };
        assert_eq!(ds.outcome()[i] - t.f[i] - w * t.tau[i], t.epsilon[i]);
    }
}

fn prefecture_rate_range(ds: &hte_core::Dataset64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (j, k) in ds.column_kinds().iter().enumerate() {
        if matches!(k, ColumnKind::OneHot { source, .. } if source == "prefecture") {
            let col = ds.covariates().column(j);
            let (mut treated, mut size) = (0.0, 0.0);
            for (v, &w) in col.iter().zip(ds.treatment()) {
                if *v == 1.0 {
                    size += 1.0;
                    treated += f64::from(u8::from(w));
                }
            }
            lo = lo.min(treated / size);
            hi = hi.max(treated / size);
        }
    }
    (lo, hi)
}

#[test]
fn ssm_like_matches_survey_moments() {
    let (ds, t) = gen_ssm_like::<f64>(7817, 1, SsmEffect::default()).unwrap();
    let (nt, _) = ds.arm_sizes();
    let share = nt as f64 / ds.n() as f64;
    assert!((share - 0.097).abs() < 0.01, "treated share {share}");
    let age = ds.covariates().column(ds.column_index("age").unwrap());
    assert!((mean(&age) - 52.97).abs() < 0.6);
    let sib = ds.covariates().column(ds.column_index("siblings").unwrap());
    assert!((mean(&sib) - 1.832).abs() < 0.05);
    let score = ds.covariates().column(ds.column_index("score").unwrap());
    assert!((mean(&score) - 3.209).abs() < 0.05);

    let y = ds.outcome();
    assert!(mean(y).abs() < 0.1);
    let sd = weighted_variance(y, &vec![1.0; y.len()]).sqrt();
    assert!((sd - 1.143).abs() < 0.1, "ITE sd {sd}");
    assert!((t.ate_true - 0.19).abs() < 0.01);
    assert!(t.att_true < t.ate_true);

    let (lo, hi) = prefecture_rate_range(&ds);
    assert!(lo <= 0.03 && hi >= 0.17, "prefecture rates [{lo}, {hi}]");
    let w = ds.weights();
    assert!((mean(w) - 1.0).abs() < 1e-12);
    assert!(t.e.iter().all(|&e| (0.02..=0.98).contains(&e)));
}

#[test]
fn mcar_masks_whole_groups() {
    let (ds, _) = gen_ssm_like::<f64>(2000, 3, SsmEffect::default()).unwrap();
    let masked = mask_mcar(&ds, &["score", "prefecture"], 0.1, 5).unwrap();
    let score = masked.column_index("score").unwrap();
    let frac = (0..ds.n()).filter(|&i| masked.is_missing(i, score)).count() as f64 / ds.n() as f64;
    assert!((frac - 0.1).abs() < 0.03);
    let pref: Vec<usize> = (0..ds.p())
        .filter(|&j| ds.column_names()[j].starts_with("prefecture="))
        .collect();
    for i in 0..ds.n() {
        let k = pref.iter().filter(|&&j| masked.is_missing(i, j)).count();
        assert!(k == 0 || k == pref.len());
    }
    assert!(mask_mcar(&ds, &["nope"], 0.1, 5).is_err());
}
