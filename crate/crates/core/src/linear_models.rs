//! Weighted least squares with sandwich covariances and weighted logistic
//! regression fitted by iteratively reweighted least squares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Real;
use crate::stats::logistic;

/// Covariance estimator attached to a [`LinearFit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceType {
    /// `sigma^2 (X'WX)^-1`, homoskedastic.
    Classical,
    /// White's estimator, `omega_i = w_i^2 e_i^2`.
    HC0,
    /// `omega_i = w_i^2 e_i^2 / (1 - h_ii)`.
    HC2,
    /// `omega_i = w_i^2 e_i^2 / (1 - h_ii)^2`.
    HC3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearFit<F> {
    pub coefficients: Vec<F>,
    pub covariance: Matrix<F>,
    pub covariance_type: CovarianceType,
    pub residuals: Vec<F>,
    pub leverage: Vec<F>,
    pub n_obs: usize,
}

impl<F: Real> LinearFit<F> {
    pub fn std_errors(&self) -> Vec<F> {
        self.covariance
            .diagonal()
            .into_iter()
            .map(|v| v.max(F::zero()).sqrt())
            .collect()
    }

    pub fn predict(&self, x: &Matrix<F>) -> Result<Vec<F>> {
        x.matvec(&self.coefficients)
    }
}

/// Householder QR of a tall matrix, keeping the thin `Q` explicitly.
struct ThinQr<F> {
    q: Matrix<F>,
    r: Matrix<F>,
}

/// Relative tolerance below which a column counts as dependent on the
/// columns before it.
const RANK_TOL: f64 = 1e-10;

fn thin_qr<F: Real>(a: &Matrix<F>) -> std::result::Result<ThinQr<F>, usize> {
    let (n, p) = (a.nrows(), a.ncols());
    let mut work = a.clone();
    let col_norms: Vec<F> = (0..p)
        .map(|j| (0..n).fold(F::zero(), |s, i| s + a[(i, j)] * a[(i, j)]).sqrt())
        .collect();
    let mut reflectors: Vec<Vec<F>> = Vec::with_capacity(p);
    let tol = F::lit(RANK_TOL);

    for k in 0..p {
        let norm = (k..n)
            .fold(F::zero(), |s, i| s + work[(i, k)] * work[(i, k)])
            .sqrt();
        if col_norms[k] == F::zero() || norm <= tol * col_norms[k] {
            return Err(k);
        }
        let alpha = if work[(k, k)] > F::zero() { -norm } else { norm };
        let mut v: Vec<F> = (k..n).map(|i| work[(i, k)]).collect();
        v[0] = v[0] - alpha;
        let vnorm2 = v.iter().fold(F::zero(), |s, &x| s + x * x);
        if vnorm2 > F::zero() {
            for j in k..p {
                let s = (k..n).fold(F::zero(), |s, i| s + v[i - k] * work[(i, j)]);
                let f = (s + s) / vnorm2;
                for i in k..n {
                    work[(i, j)] = work[(i, j)] - f * v[i - k];
                }
            }
        }
        reflectors.push(v);
    }

    let mut r = Matrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            r[(i, j)] = work[(i, j)];
        }
    }

    // Q = H_0 H_1 ... H_{p-1} applied to the first p columns of I.
    let mut q = Matrix::zeros(n, p);
    for j in 0..p {
        q[(j, j)] = F::one();
    }
    for k in (0..p).rev() {
        let v = &reflectors[k];
        let vnorm2 = v.iter().fold(F::zero(), |s, &x| s + x * x);
        if vnorm2 == F::zero() {
            continue;
        }
        for j in 0..p {
            let s = (k..n).fold(F::zero(), |s, i| s + v[i - k] * q[(i, j)]);
            let f = (s + s) / vnorm2;
            for i in k..n {
                q[(i, j)] = q[(i, j)] - f * v[i - k];
            }
        }
    }
    Ok(ThinQr { q, r })
}

/// Solves `R x = b` for upper-triangular `R`.
fn back_substitute<F: Real>(r: &Matrix<F>, b: &[F]) -> Vec<F> {
    let p = r.ncols();
    let mut x = vec![F::zero(); p];
    for i in (0..p).rev() {
        let mut s = b[i];
        for j in i + 1..p {
            s = s - r[(i, j)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// `R^-1` for upper-triangular `R`.
fn triangular_inverse<F: Real>(r: &Matrix<F>) -> Matrix<F> {
    let p = r.ncols();
    let mut inv = Matrix::zeros(p, p);
    let mut e = vec![F::zero(); p];
    for j in 0..p {
        e.iter_mut().for_each(|v| *v = F::zero());
        e[j] = F::one();
        let col = back_substitute(r, &e);
        for i in 0..p {
            inv[(i, j)] = col[i];
        }
    }
    inv
}

fn check_weights<F: Real>(n: usize, weights: &[F]) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Dimension(format!(
            "{} weights for {n} observations",
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|&w| !(w > F::zero() && w.is_finite())) {
        return Err(Error::InvalidRow {
            row: i + 1,
            msg: "weights must be positive and finite".into(),
        });
    }
    Ok(())
}

/// Weighted least squares of `y` on the columns of `x` (include an intercept
/// column yourself if you want one).
pub fn ols_fit<F: Real>(
    x: &Matrix<F>,
    y: &[F],
    weights: &[F],
    covariance_type: CovarianceType,
) -> Result<LinearFit<F>> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::Dimension(format!("{} outcomes for {n} rows", y.len())));
    }
    check_weights(n, weights)?;
    if n <= p {
        return Err(Error::Invalid(format!("need more rows than columns ({n} <= {p})")));
    }

    let sqrt_w: Vec<F> = weights.iter().map(|w| w.sqrt()).collect();
    let mut xs = x.clone();
    for i in 0..n {
        let s = sqrt_w[i];
        xs.row_mut(i).iter_mut().for_each(|v| *v = *v * s);
    }
    let ThinQr { q, r } = thin_qr(&xs).map_err(|index| Error::SingularDesign {
        index,
        name: format!("x{index}"),
    })?;

    let qty: Vec<F> = (0..p)
        .map(|j| (0..n).fold(F::zero(), |s, i| s + q[(i, j)] * sqrt_w[i] * y[i]))
        .collect();
    let coefficients = back_substitute(&r, &qty);
    let residuals: Vec<F> = (0..n).map(|i| y[i] - dot(x.row(i), &coefficients)).collect();
    let leverage: Vec<F> = (0..n)
        .map(|i| q.row(i).iter().fold(F::zero(), |s, &v| s + v * v))
        .collect();

    let r_inv = triangular_inverse(&r);
    let bread = r_inv.matmul(&r_inv.transpose())?;

    let covariance = match covariance_type {
        CovarianceType::Classical => {
            let rss = (0..n).fold(F::zero(), |s, i| s + weights[i] * residuals[i] * residuals[i]);
            let sigma2 = rss / F::from_count(n - p);
            bread.map(|v| v * sigma2)
        }
        hc => {
            let power = match hc {
                CovarianceType::HC0 => 0,
                CovarianceType::HC2 => 1,
                _ => 2,
            };
            let mut meat = Matrix::zeros(p, p);
            for i in 0..n {
                let e = sqrt_w[i] * residuals[i];
                let one_minus_h = F::one() - leverage[i];
                let omega = if one_minus_h <= F::epsilon() {
                    F::zero()
                } else {
                    e * e / one_minus_h.powi(power)
                };
                if omega == F::zero() {
                    continue;
                }
                let xi = xs.row(i);
                for a in 0..p {
                    let f = omega * xi[a];
                    for b in 0..p {
                        meat[(a, b)] = meat[(a, b)] + f * xi[b];
                    }
                }
            }
            let mut cov = bread.matmul(&meat)?.matmul(&bread)?;
            // symmetrize rounding noise
            for a in 0..p {
                for b in 0..a {
                    let m = (cov[(a, b)] + cov[(b, a)]) / F::lit(2.0);
                    cov[(a, b)] = m;
                    cov[(b, a)] = m;
                }
            }
            cov
        }
    };

    Ok(LinearFit {
        coefficients,
        covariance,
        covariance_type,
        residuals,
        leverage,
        n_obs: n,
    })
}

/// Indices of a maximal set of columns of `x` that are linearly independent,
/// scanning left to right and dropping each column that depends on the ones
/// kept before it.
pub fn independent_columns<F: Real>(x: &Matrix<F>) -> Vec<usize> {
    let mut active: Vec<usize> = (0..x.ncols()).collect();
    while !active.is_empty() {
        match thin_qr(&x.select_columns(&active)) {
            Ok(_) => break,
            Err(k) => {
                active.remove(k);
            }
        }
    }
    active
}

/// Like [`ols_fit`], naming a dependent column in the error by `names`.
pub fn ols_fit_named<F: Real>(
    x: &Matrix<F>,
    names: &[String],
    y: &[F],
    weights: &[F],
    covariance_type: CovarianceType,
) -> Result<LinearFit<F>> {
    ols_fit(x, y, weights, covariance_type).map_err(|e| match e {
        Error::SingularDesign { index, .. } => Error::SingularDesign {
            index,
            name: names.get(index).cloned().unwrap_or_else(|| format!("x{index}")),
        },
        other => other,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogisticFit<F> {
    pub coefficients: Vec<F>,
    pub converged: bool,
    pub iterations: usize,
    /// Weighted log-likelihood after each accepted iteration.
    pub log_likelihood: Vec<F>,
    /// Predictions are clamped to `[clamp, 1 - clamp]`.
    pub clamp: F,
}

pub const LOGISTIC_MAX_ITER: usize = 100;
pub const LOGISTIC_GRAD_TOL: f64 = 1e-8;
/// Linear predictors beyond this magnitude signal (quasi-)separation.
const SEPARATION_ETA: f64 = 35.0;
/// Prediction clamp for fits that stopped on separation.
pub const SEPARATED_CLAMP: f64 = 1e-6;

fn log_likelihood<F: Real>(eta: &[F], y: &[bool], weights: &[F]) -> F {
    // log p = -log(1 + e^-eta), log(1-p) = -log(1 + e^eta)
    let softplus = |z: F| {
        if z > F::zero() {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        }
    };
    eta.iter()
        .zip(y)
        .zip(weights)
        .fold(F::zero(), |s, ((&e, &yi), &w)| {
            s - w * if yi { softplus(-e) } else { softplus(e) }
        })
}

/// Weighted logistic regression of the binary `y` on the columns of `x`.
///
/// Newton/IRLS with step halving, so the log-likelihood never decreases.
/// Stops with `converged = false` when the linear predictor diverges, which
/// is how complete separation shows up.
pub fn logistic_fit<F: Real>(x: &Matrix<F>, y: &[bool], weights: &[F]) -> Result<LogisticFit<F>> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", y.len())));
    }
    check_weights(n, weights)?;
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::SingleClass);
    }
    let total_w = weights.iter().copied().sum::<F>();
    let tol = F::lit(LOGISTIC_GRAD_TOL);
    let sep = F::lit(SEPARATION_ETA);

    let mut beta = vec![F::zero(); p];
    let mut eta = vec![F::zero(); n];
    let mut ll = log_likelihood(&eta, y, weights);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;

    while iterations < LOGISTIC_MAX_ITER {
        let prob: Vec<F> = eta.iter().map(|&e| logistic(e)).collect();
        let mut grad = vec![F::zero(); p];
        for i in 0..n {
            let r = weights[i] * ((if y[i] { F::one() } else { F::zero() }) - prob[i]);
            for (g, &xv) in grad.iter_mut().zip(x.row(i)) {
                *g = *g + r * xv;
            }
        }
        let max_grad = grad.iter().fold(F::zero(), |m, g| m.max(g.abs())) / total_w;
        if max_grad < tol {
            converged = true;
            break;
        }
        iterations += 1;

        // Newton direction from the QR of sqrt(w p (1-p)) X.
        let mut xs = x.clone();
        for i in 0..n {
            let s = (weights[i] * prob[i] * (F::one() - prob[i])).sqrt();
            xs.row_mut(i).iter_mut().for_each(|v| *v = *v * s);
        }
        let Ok(ThinQr { r, .. }) = thin_qr(&xs) else {
            separated = true;
            break;
        };
        // (R'R) d = grad
        let rt = r.transpose();
        let mut z = vec![F::zero(); p];
        for i in 0..p {
            let mut s = grad[i];
            for j in 0..i {
                s = s - rt[(i, j)] * z[j];
            }
            z[i] = s / rt[(i, i)];
        }
        let dir = back_substitute(&r, &z);

        let mut step = F::one();
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<F> = beta.iter().zip(&dir).map(|(&b, &d)| b + step * d).collect();
            let cand_eta = x.matvec(&cand)?;
            let cand_ll = log_likelihood(&cand_eta, y, weights);
            if cand_ll >= ll {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            step = step / F::lit(2.0);
        }
        if !accepted {
            // no ascent possible at machine precision: stationary point
            converged = true;
            break;
        }
        trace.push(ll);
        if eta.iter().any(|e| e.abs() > sep) {
            separated = true;
            break;
        }
    }
    if separated {
        converged = false;
    }

    Ok(LogisticFit {
        coefficients: beta,
        converged,
        iterations,
        log_likelihood: trace,
        clamp: if converged {
            F::epsilon()
        } else {
            F::lit(SEPARATED_CLAMP)
        },
    })
}

/// `1 / (1 + exp(-X beta))`, clamped into the open unit interval.
pub fn predict_proba<F: Real>(fit: &LogisticFit<F>, x: &Matrix<F>) -> Result<Vec<F>> {
    if x.ncols() != fit.coefficients.len() {
        return Err(Error::Dimension(format!(
            "fit has {} coefficients, design has {} columns",
            fit.coefficients.len(),
            x.ncols()
        )));
    }
    let hi = F::one() - fit.clamp;
    Ok(x.rows_iter()
        .map(|row| logistic(dot(row, &fit.coefficients)).max(fit.clamp).min(hi))
        .collect())
}
