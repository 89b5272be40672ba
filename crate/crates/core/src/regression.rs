//! Parametric nuisance fits: least squares for the outcome regression on
//! the `W = 0` units and a logistic model for P{W = 0 | X}.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Columns whose residual norm falls below this fraction of their own norm
/// after projection on the kept columns are dropped.
const RANK_TOL: f64 = 1e-10;

/// OLS fit of Y on `[1, X]` over the `W = 0` units.
#[derive(Debug, Clone)]
pub struct OlsFit {
    /// Indices into `[intercept, x1, …, xd]` that survived the rank check.
    pub kept_columns: Vec<usize>,
    pub coefficients: Vec<f64>,
    /// m̂(Xᵢ) for every unit.
    pub fitted: Vec<f64>,
    /// Linear-smoother weights: n⁻¹ Σ_{W=0} γᵢ Yᵢ equals n⁻¹ Σ_{T=1} m̂(Xᵢ).
    pub weights: Vec<f64>,
}

fn design_row(data: &Dataset, i: usize, cols: &[usize]) -> Vec<f64> {
    let x = data.covariates();
    cols.iter().map(|&c| if c == 0 { 1.0 } else { x[(i, c - 1)] }).collect()
}

/// Left-to-right column selection by modified Gram–Schmidt.
fn independent_columns(design: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for (j, col) in design.column_iter().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = col.clone_owned();
        for q in &basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
        let rn = r.norm();
        if rn > RANK_TOL * norm {
            basis.push(r / rn);
            kept.push(j);
        }
    }
    kept
}

pub fn fit_ols(data: &Dataset) -> Result<OlsFit> {
    data.require_groups()?;
    let treated = data.treated_indices();
    let p_all = data.dim() + 1;
    let full = DMatrix::from_fn(treated.len(), p_all, |a, c| {
        if c == 0 {
            1.0
        } else {
            data.covariates()[(treated[a], c - 1)]
        }
    });
    let kept = independent_columns(&full);
    if kept.is_empty() {
        return Err(Error::Domain("no usable columns in the W=0 design matrix".into()));
    }
    let design = full.select_columns(&kept);
    let y = DVector::from_vec(data.treated_outcomes());

    let qr = design.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let qty = q.transpose() * &y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical { message: "singular R in least squares".into(), condition: f64::INFINITY })?;

    let fitted: Vec<f64> = (0..data.n())
        .map(|i| design_row(data, i, &kept).iter().zip(beta.iter()).map(|(a, b)| a * b).sum())
        .collect();

    // γ = Q R⁻ᵀ s with s = Σ_{T=1} x̃ᵢ.
    let mut s = DVector::zeros(kept.len());
    for &i in data.target_indices() {
        s += DVector::from_vec(design_row(data, i, &kept));
    }
    let u = r
        .transpose()
        .solve_lower_triangular(&s)
        .ok_or_else(|| Error::Numerical { message: "singular R in least squares".into(), condition: f64::INFINITY })?;
    let weights = (q * u).as_slice().to_vec();

    Ok(OlsFit { kept_columns: kept, coefficients: beta.as_slice().to_vec(), fitted, weights })
}

/// Fitted propensity model for P{W = 0 | X}.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    /// Intercept followed by one slope per covariate, on the raw scale.
    pub coefficients: Vec<f64>,
    /// Clipped fitted probabilities for every unit.
    pub fitted: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Probabilities are clipped to `[clip, 1 − clip]`.
    pub clip: f64,
    /// Number of units whose probability was clipped.
    pub clipped: usize,
}

pub const PROPENSITY_CLIP: f64 = 1e-6;
const MAX_NEWTON_ITERS: usize = 100;
const SCORE_TOL: f64 = 1e-10;
/// Linear predictors beyond this magnitude mean fitted probabilities have
/// collapsed onto 0 or 1, i.e. (quasi-)separation.
const SEPARATION_ETA: f64 = 35.0;

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn log_likelihood(design: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| {
            // log(1 + e^η) computed stably.
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            yi * e - softplus
        })
        .sum()
}

/// Newton–Raphson maximum likelihood for a logistic model of `1{W = 0}` on
/// `[1, X]`. Covariates are standardized internally; coefficients are
/// reported on the raw scale. Convergence means the largest per-unit score
/// component is at most 1e-10.
pub fn fit_logistic(data: &Dataset) -> Result<PropensityFit> {
    let n = data.n();
    let d = data.dim();
    let nz = data.n_treated();
    if nz == 0 || nz == n {
        return Err(Error::Domain("propensity model needs units with W=0 and W≠0".into()));
    }
    let x = data.covariates();
    let mut means = vec![0.0; d];
    let mut scales = vec![1.0; d];
    for j in 0..d {
        let col = x.column(j);
        let m = col.mean();
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        means[j] = m;
        if sd > 0.0 {
            scales[j] = sd;
        }
    }
    let design = DMatrix::from_fn(n, d + 1, |i, c| if c == 0 { 1.0 } else { (x[(i, c - 1)] - means[c - 1]) / scales[c - 1] });
    let y: Vec<f64> = data.treatment().iter().map(|&w| if w == 0 { 1.0 } else { 0.0 }).collect();

    let p0 = nz as f64 / n as f64;
    let mut beta = DVector::zeros(d + 1);
    beta[0] = (p0 / (1.0 - p0)).ln();
    let mut ll = log_likelihood(&design, &y, &beta);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;

    while iterations < MAX_NEWTON_ITERS {
        let eta = &design * &beta;
        let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let resid = DVector::from_iterator(n, y.iter().zip(&p).map(|(yi, pi)| yi - pi));
        let score = design.transpose() * &resid;
        if eta.amax() > SEPARATION_ETA {
            separated = true;
            break;
        }
        if score.amax() / n as f64 <= SCORE_TOL {
            converged = true;
            break;
        }
        iterations += 1;

        let mut hess = DMatrix::zeros(d + 1, d + 1);
        for i in 0..n {
            let wt = p[i] * (1.0 - p[i]);
            let row = design.row(i);
            for a in 0..=d {
                let ra = row[a] * wt;
                for b in 0..=a {
                    hess[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..=d {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => {
                let mut ridge = hess.clone();
                let bump = 1e-8 * (hess.trace() / (d + 1) as f64).max(1e-300);
                for a in 0..=d {
                    ridge[(a, a)] += bump;
                }
                match ridge.cholesky() {
                    Some(ch) => ch.solve(&score),
                    None => {
                        separated = true;
                        break;
                    }
                }
            }
        };

        // Step halving keeps the likelihood monotone.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &beta + &step * scale;
            let trial_ll = log_likelihood(&design, &y, &trial);
            if trial_ll.is_finite() && trial_ll >= ll - 1e-12 * ll.abs() {
                beta = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if separated {
        converged = false;
    }

    let eta = &design * &beta;
    let mut clipped = 0;
    let fitted = eta
        .iter()
        .map(|&e| {
            let p = sigmoid(e);
            let c = p.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP);
            if c != p {
                clipped += 1;
            }
            c
        })
        .collect();

    let mut coefficients = vec![beta[0]];
    for j in 0..d {
        coefficients[0] -= beta[j + 1] * means[j] / scales[j];
        coefficients.push(beta[j + 1] / scales[j]);
    }
    Ok(PropensityFit { coefficients, fitted, converged, iterations, clip: PROPENSITY_CLIP, clipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_names, TargetRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn missing_data(x: DMatrix<f64>, w: Vec<u32>, y: impl Fn(&[f64]) -> f64) -> Dataset {
        let d = x.ncols();
        let yv = (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                if w[i] == 0 {
                    Some(y(&row))
                } else {
                    None
                }
            })
            .collect();
        Dataset::with_rule(x, w, yv, TargetRule::All, default_names(d)).unwrap()
    }

    #[test]
    fn ols_recovers_linear_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-2.0..2.0));
        let w: Vec<u32> = (0..n).map(|i| (i % 3 == 0) as u32).collect();
        let f = |r: &[f64]| 1.5 + 2.0 * r[0] - r[1] + 0.25 * r[2];
        let data = missing_data(x.clone(), w, f);
        let fit = fit_ols(&data).unwrap();
        let truth: f64 = (0..n).map(|i| f(&data.row(i))).sum::<f64>() / n as f64;
        let est: f64 = fit.fitted.iter().sum::<f64>() / n as f64;
        assert!((est - truth).abs() < 1e-10);
        let via_weights: f64 = fit.weights.iter().zip(data.treated_outcomes()).map(|(g, y)| g * y).sum::<f64>() / n as f64;
        assert!((via_weights - truth).abs() < 1e-10);
        assert!((fit.weights.iter().sum::<f64>() - n as f64).abs() < 1e-9);
    }

    #[test]
    fn ols_drops_collinear_columns_left_to_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20;
        let x = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => i as f64,
            1 => 2.0 * i as f64 + 1.0,
            _ => rng.random_range(0.0..1.0),
        });
        let data = missing_data(x, vec![0; n], |r| r[0] + r[2]);
        let fit = fit_ols(&data).unwrap();
        assert_eq!(fit.kept_columns, vec![0, 1, 3]);
    }

    #[test]
    fn intercept_only_gives_treated_mean() {
        let x = DMatrix::from_row_slice(4, 1, &[5.0, 5.0, 5.0, 5.0]);
        let data = missing_data(x, vec![0, 0, 1, 0], |_| 0.0)
            .with_outcomes(vec![Some(1.0), Some(2.0), None, Some(6.0)])
            .unwrap();
        let fit = fit_ols(&data).unwrap();
        assert_eq!(fit.kept_columns, vec![0]);
        assert!(fit.fitted.iter().all(|&m| (m - 3.0).abs() < 1e-12));
    }

    #[test]
    fn logistic_matches_grid_oracle_when_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let w: Vec<u32> = (0..n).map(|_| rng.random_bool(0.5) as u32).collect();
        let data = missing_data(x.clone(), w.clone(), |_| 0.0);
        let fit = fit_logistic(&data).unwrap();
        assert!(fit.converged);

        // Brute-force maximizer of the log-likelihood on a fine grid, refined twice.
        let ll = |a: f64, b: f64| -> f64 {
            (0..n)
                .map(|i| {
                    let e = a + b * x[(i, 0)];
                    let yi = if w[i] == 0 { 1.0 } else { 0.0 };
                    yi * e - (1.0 + e.exp()).ln()
                })
                .sum()
        };
        let (mut ca, mut cb, mut h) = (0.0, 0.0, 0.05);
        for _ in 0..3 {
            let mut best = (f64::NEG_INFINITY, ca, cb);
            for i in -40..=40 {
                for j in -40..=40 {
                    let (a, b) = (ca + i as f64 * h, cb + j as f64 * h);
                    let v = ll(a, b);
                    if v > best.0 {
                        best = (v, a, b);
                    }
                }
            }
            ca = best.1;
            cb = best.2;
            h /= 40.0;
        }
        assert!((fit.coefficients[0] - ca).abs() < 1e-4, "{} vs {ca}", fit.coefficients[0]);
        assert!((fit.coefficients[1] - cb).abs() < 1e-4, "{} vs {cb}", fit.coefficients[1]);
        let nz = w.iter().filter(|&&v| v == 0).count() as f64;
        let logit = (nz / (n as f64 - nz)).ln();
        assert!((fit.coefficients[0] - logit).abs() < 0.25);
        assert!(fit.coefficients[1].abs() < 0.4);
    }

    #[test]
    fn separation_is_reported() {
        let x = DMatrix::from_row_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let data = missing_data(x, vec![0, 0, 0, 1, 1, 1], |_| 1.0);
        let fit = fit_logistic(&data).unwrap();
        assert!(!fit.converged);
        assert!((fit.fitted[0] - (1.0 - PROPENSITY_CLIP)).abs() < 1e-15);
        assert!((fit.fitted[5] - PROPENSITY_CLIP).abs() < 1e-15);
        assert!(fit.clipped >= 2);
    }
}
