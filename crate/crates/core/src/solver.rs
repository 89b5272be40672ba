//! Minimax linear weights, the dual kernel ridge regression, and the
//! worst-case imbalance over the RKHS unit ball.
//!
//! With `n` units in total, the weights minimize
//!
//! ```text
//! I(γ)² + (σ²/n²)‖γ‖²,  n²·I(γ)² = 1ᵀK_TT1 − 2γᵀK_ZT1 + γᵀK_ZZγ
//! ```
//!
//! whose first-order condition is `(K_ZZ + σ²I)γ = K_ZT·1`.

use nalgebra::DVector;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{gram_blocks, GramBlocks, KernelSpec, PreparedKernel};
use crate::linalg::{dot, SpdFactor};

/// Solved weights over the `W = 0` units, in `treated_indices` order.
#[derive(Debug, Clone)]
pub struct BalanceWeights {
    pub gamma: Vec<f64>,
    pub sigma2: f64,
    /// I(γ)² + (σ²/n²)‖γ‖² at the solution.
    pub objective: f64,
    /// I(γ).
    pub imbalance: f64,
    pub jitter_added: f64,
}

impl BalanceWeights {
    pub fn sum(&self) -> f64 {
        self.gamma.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.gamma.iter().fold(0.0, |m: f64, g| m.max(g.abs()))
    }
}

/// Solves for the minimax weights. `sigma2 = 0` is accepted and falls back
/// on jitter if K_ZZ is singular.
pub fn solve_weights(blocks: &GramBlocks, n_total: usize, sigma2: f64) -> Result<BalanceWeights> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Config(format!("sigma^2 must be nonnegative and finite, got {sigma2}")));
    }
    check_total(blocks, n_total)?;
    let (gamma, jitter) = match blocks.linear_features() {
        // (ΦΦᵀ + σ²I)⁻¹ Φ s = Φ (ΦᵀΦ + σ²I)⁻¹ s. The small system stays well
        // conditioned as σ → 0, where the n_Z × n_Z one does not.
        Some(f) => {
            let factor = SpdFactor::new(&(f.phi.transpose() * &f.phi), sigma2)?;
            let c = factor.solve(&DVector::from_column_slice(&f.target_sum));
            ((&f.phi * c).as_slice().to_vec(), factor.jitter)
        }
        None => {
            let factor = SpdFactor::new(&blocks.zz, sigma2)?;
            (factor.solve_slice(&blocks.target_embedding()), factor.jitter)
        }
    };
    let imbalance = balance_norm(blocks, &gamma, n_total)?;
    let n2 = (n_total as f64).powi(2);
    let objective = imbalance * imbalance + sigma2 / n2 * dot(&gamma, &gamma);
    Ok(BalanceWeights { gamma, sigma2, objective, imbalance, jitter_added: jitter })
}

/// I(γ): the largest signed gap between the γ-weighted `W = 0` average and
/// the target average of any function in the RKHS unit ball.
pub fn balance_norm(blocks: &GramBlocks, gamma: &[f64], n_total: usize) -> Result<f64> {
    if gamma.len() != blocks.n_treated() {
        return Err(Error::Domain(format!(
            "weight vector has length {}, expected {}",
            gamma.len(),
            blocks.n_treated()
        )));
    }
    check_total(blocks, n_total)?;
    let g = DVector::from_column_slice(gamma);
    let quad = blocks.target_mass() - 2.0 * dot(gamma, &blocks.target_embedding())
        + g.dot(&(&blocks.zz * &g));
    // Cancellation can leave a tiny negative value near perfect balance.
    Ok(quad.max(0.0).sqrt() / n_total as f64)
}

/// Penalized objective at an arbitrary weight vector.
pub fn objective(blocks: &GramBlocks, gamma: &[f64], n_total: usize, sigma2: f64) -> Result<f64> {
    let imb = balance_norm(blocks, gamma, n_total)?;
    Ok(imb * imb + sigma2 / (n_total as f64).powi(2) * dot(gamma, gamma))
}

fn check_total(blocks: &GramBlocks, n_total: usize) -> Result<()> {
    if n_total == 0 || n_total < blocks.n_treated() || n_total < blocks.n_target() {
        return Err(Error::Domain(format!(
            "n_total {n_total} is smaller than a group ({} W=0, {} target)",
            blocks.n_treated(),
            blocks.n_target()
        )));
    }
    Ok(())
}

/// Kernel ridge regression of the `W = 0` outcomes.
#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub dual_coeffs: Vec<f64>,
    pub sigma2: f64,
    pub jitter_added: f64,
    kernel: PreparedKernel,
    points: Vec<Vec<f64>>,
}

impl RidgeFit {
    /// m̂(x) for a raw covariate row.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.kernel.transform(x);
        self.points
            .iter()
            .zip(&self.dual_coeffs)
            .map(|(p, a)| a * self.kernel.eval_transformed(&z, p))
            .sum()
    }
}

/// Fits m̂ = Σ_j α_j K(·, X_j) with α = (K_ZZ + σ²I)⁻¹ y.
pub fn ridge_fit(blocks: &GramBlocks, y_treated: &[f64], sigma2: f64) -> Result<RidgeFit> {
    if y_treated.len() != blocks.n_treated() {
        return Err(Error::Domain(format!(
            "{} outcomes for {} W=0 units",
            y_treated.len(),
            blocks.n_treated()
        )));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Config(format!("sigma^2 must be nonnegative and finite, got {sigma2}")));
    }
    let factor = SpdFactor::new(&blocks.zz, sigma2)?;
    Ok(RidgeFit {
        dual_coeffs: factor.solve_slice(y_treated),
        sigma2,
        jitter_added: factor.jitter,
        kernel: blocks.kernel.clone(),
        points: blocks.treated_points().to_vec(),
    })
}

/// Both sides of the weighting/regression identity, computed separately.
#[derive(Debug, Clone, Copy)]
pub struct DualityCheck {
    /// n⁻¹ Σ_{W=0} γ̂ᵢ Yᵢ.
    pub weighting_estimate: f64,
    /// n⁻¹ Σ_{T=1} m̂(Xᵢ).
    pub regression_estimate: f64,
    pub gap: f64,
}

pub fn check_duality(data: &Dataset, spec: &KernelSpec, sigma2: f64) -> Result<DualityCheck> {
    let blocks = gram_blocks(data, spec)?;
    let n = data.n();
    let y = data.treated_outcomes();

    let weights = solve_weights(&blocks, n, sigma2)?;
    let weighting_estimate = dot(&weights.gamma, &y) / n as f64;

    let fit = ridge_fit(&blocks, &y, sigma2)?;
    let regression_estimate = data
        .target_indices()
        .iter()
        .map(|&i| fit.predict(&data.row(i)))
        .sum::<f64>()
        / n as f64;

    Ok(DualityCheck {
        weighting_estimate,
        regression_estimate,
        gap: (weighting_estimate - regression_estimate).abs(),
    })
}
