//! Small weighted-moment and distribution helpers shared across modules.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::scalar::Real;

pub fn sum<F: Real>(x: &[F]) -> F {
    x.iter().copied().fold(F::zero(), |a, b| a + b)
}

pub fn mean<F: Real>(x: &[F]) -> F {
    sum(x) / F::from_count(x.len())
}

pub fn weighted_mean<F: Real>(x: &[F], w: &[F]) -> F {
    let (num, den) = x
        .iter()
        .zip(w)
        .fold((F::zero(), F::zero()), |(n, d), (&xi, &wi)| (n + wi * xi, d + wi));
    num / den
}

/// Frequency-weighted population variance, `sum w (x - m)^2 / sum w`.
pub fn weighted_variance<F: Real>(x: &[F], w: &[F]) -> F {
    let m = weighted_mean(x, w);
    let (num, den) = x.iter().zip(w).fold((F::zero(), F::zero()), |(n, d), (&xi, &wi)| {
        let r = xi - m;
        (n + wi * r * r, d + wi)
    });
    num / den
}

/// Sample standard deviation with the `n - 1` divisor.
pub fn sample_sd<F: Real>(x: &[F]) -> F {
    let m = mean(x);
    let ss = x.iter().fold(F::zero(), |a, &v| a + (v - m) * (v - m));
    (ss / F::from_count(x.len().saturating_sub(1).max(1))).sqrt()
}

/// Weighted mean of `values` and its standard error.
///
/// The SE is `sqrt(sum w^2 (x - m)^2) / sum w`, inflated by `n / (n - 1)` so
/// that unit weights give the textbook `sd / sqrt(n)`.
pub fn mean_with_se<F: Real>(values: &[F], weights: &[F]) -> (F, F) {
    let n = values.len();
    let m = weighted_mean(values, weights);
    if n < 2 {
        return (m, F::zero());
    }
    let (ss, sw) = values
        .iter()
        .zip(weights)
        .fold((F::zero(), F::zero()), |(s, t), (&x, &w)| {
            let r = w * (x - m);
            (s + r * r, t + w)
        });
    let nf = F::from_count(n);
    let var = ss / (sw * sw) * nf / (nf - F::one());
    (m, var.sqrt())
}

/// R's default (type 7) quantile of already sorted data.
pub fn quantile_sorted<F: Real>(sorted: &[F], p: f64) -> F {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = F::lit(h - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn sorted_copy<F: Real>(x: &[F]) -> Vec<F> {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in sort"));
    v
}

pub fn pearson<F: Real>(x: &[F], y: &[F]) -> F {
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (F::zero(), F::zero(), F::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy = sxy + da * db;
        sxx = sxx + da * da;
        syy = syy + db * db;
    }
    sxy / (sxx * syy).sqrt()
}

/// Ranks with ties averaged, 1-based.
pub fn ranks<F: Real>(x: &[F]) -> Vec<F> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("NaN in ranks"));
    let mut r = vec![F::zero(); x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = F::lit((i + j) as f64 / 2.0 + 1.0);
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman<F: Real>(x: &[F], y: &[F]) -> F {
    pearson(&ranks(x), &ranks(y))
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    (2.0 * (1.0 - normal_cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(stat: f64, df: usize) -> f64 {
    if df == 0 || stat.is_nan() {
        return f64::NAN;
    }
    let dist = ChiSquared::new(df as f64).expect("positive df");
    1.0 - dist.cdf(stat.max(0.0))
}

#[inline]
pub fn logistic<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_matches_r_type7() {
        // quantile(1:10, c(0, .25, .5, .9, 1)) in R
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let want = [1.0, 3.25, 5.5, 9.1, 10.0];
        for (p, w) in [0.0, 0.25, 0.5, 0.9, 1.0].iter().zip(want) {
            assert!((quantile_sorted(&x, *p) - w).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_se_unit_weights_is_sd_over_root_n() {
        let x = [1.0f64, 2.0, 4.0, 7.0];
        let (m, se) = mean_with_se(&x, &[1.0; 4]);
        assert!((m - 3.5).abs() < 1e-15);
        let sd = sample_sd(&x);
        assert!((se - sd / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn normal_tails() {
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-10);
        assert!((two_sided_p(1.959963984540054) - 0.05).abs() < 1e-10);
        assert!((chi_square_sf(3.841458820694124, 1) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(-800.0f64), 0.0);
        assert_eq!(logistic(800.0f64), 1.0);
        assert!((logistic(0.3f64) - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-16);
    }
}
