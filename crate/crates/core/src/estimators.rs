//! Point estimators of the target mean, their variance estimates, and
//! normal-approximation confidence intervals.
//!
//! Every estimator here is linear in the `W = 0` outcomes, so each one
//! exposes the weights it implicitly uses. Variance estimates plug those
//! weights and the auxiliary OLS regression into
//!
//! ```text
//! V̂ = n⁻¹ Σᵢ (Tᵢ m̂(Xᵢ) − ψ̂)² + n⁻¹ Σ_{W=0} γᵢ² (Yᵢ − m̂(Xᵢ))²
//! ```
//!
//! which reduces to the familiar target-sum form when every unit is a
//! target. For the rescaled estimand the first sum runs over target units
//! centered at the rescaled estimate, and the interval is widened by n/n_T.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{gram_blocks, KernelSpec};
use crate::linalg::dot;
use crate::normal;
use crate::regression::{fit_logistic, fit_ols, OlsFit, PropensityFit};
use crate::solver::{solve_weights, BalanceWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    Ipw,
    Aipw,
    Ols,
    Ml,
    Mlt,
    Att,
}

impl EstimatorKind {
    pub const ROSTER: [EstimatorKind; 5] =
        [EstimatorKind::Ipw, EstimatorKind::Aipw, EstimatorKind::Ols, EstimatorKind::Ml, EstimatorKind::Mlt];

    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Ipw => "IPW",
            EstimatorKind::Aipw => "AIPW",
            EstimatorKind::Ols => "OLS",
            EstimatorKind::Ml => "ML",
            EstimatorKind::Mlt => "MLt",
            EstimatorKind::Att => "ATT",
        }
    }

    /// Whether the estimator depends on the kernel penalty σ.
    pub fn uses_sigma(&self) -> bool {
        matches!(self, EstimatorKind::Ml | EstimatorKind::Mlt | EstimatorKind::Att)
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label().to_ascii_lowercase())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ml" => Ok(EstimatorKind::Ml),
            "mlt" => Ok(EstimatorKind::Mlt),
            "ols" => Ok(EstimatorKind::Ols),
            "ipw" => Ok(EstimatorKind::Ipw),
            "aipw" => Ok(EstimatorKind::Aipw),
            "att" => Ok(EstimatorKind::Att),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Confidence level and whether to report ψ^c = ψ·n/n_T instead of ψ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub level: f64,
    pub scaled: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { level: 0.95, scaled: false }
    }
}

impl ReportOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

/// Solver and weighting metadata carried alongside an estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReportMeta {
    pub jitter: Option<f64>,
    pub max_weight: f64,
    pub weight_sum: f64,
    pub propensity_converged: Option<bool>,
    /// Units whose propensity hit the clipping bound.
    pub clipped: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub point: f64,
    /// V̂ on the per-observation scale.
    pub variance: f64,
    pub half_width: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub scaled: bool,
    pub meta: ReportMeta,
}

impl EstimateReport {
    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceEstimate {
    pub variance: f64,
    pub half_width: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// n⁻¹ Σ_{W=0} γᵢ Yᵢ.
pub fn weighted_point(data: &Dataset, weights: &[f64]) -> f64 {
    dot(weights, &data.treated_outcomes()) / data.n() as f64
}

/// n⁻¹ Σᵢ [Tᵢ m̂(Xᵢ)] + n⁻¹ Σ_{W=0} γᵢ (Yᵢ − m̂(Xᵢ)).
pub fn augmented_point(data: &Dataset, m_hat: &[f64], weights: &[f64]) -> f64 {
    let n = data.n() as f64;
    let plug_in: f64 = data.target_indices().iter().map(|&i| m_hat[i]).sum();
    let correction: f64 = data
        .treated_indices()
        .iter()
        .zip(weights)
        .map(|(&i, g)| g * (data.outcomes()[i].expect("validated") - m_hat[i]))
        .sum();
    (plug_in + correction) / n
}

fn rescale(data: &Dataset, value: f64, scaled: bool) -> f64 {
    if scaled {
        value * data.n() as f64 / data.n_target() as f64
    } else {
        value
    }
}

/// Variance and interval for a linear estimator with weights `weights`
/// (over `W = 0` units) and reported estimate `point`.
pub fn variance_with_fit(
    data: &Dataset,
    aux: &OlsFit,
    weights: &[f64],
    point: f64,
    opts: &ReportOptions,
) -> Result<VarianceEstimate> {
    opts.validate()?;
    let n = data.n();
    let nt = data.n_target();
    if nt == 0 {
        return Err(Error::Domain("no target units: variance undefined".into()));
    }
    if weights.len() != data.n_treated() {
        return Err(Error::Domain(format!("{} weights for {} W=0 units", weights.len(), data.n_treated())));
    }
    let m = &aux.fitted;
    let spread: f64 = if opts.scaled {
        data.target_indices().iter().map(|&i| (m[i] - point).powi(2)).sum()
    } else {
        let t = data.targets();
        (0..n).map(|i| (if t[i] { m[i] } else { 0.0 } - point).powi(2)).sum()
    };
    let noise: f64 = data
        .treated_indices()
        .iter()
        .zip(weights)
        .map(|(&i, g)| (g * (data.outcomes()[i].expect("validated") - m[i])).powi(2))
        .sum();
    let variance = (spread + noise) / n as f64;
    let adj = if opts.scaled { n as f64 / nt as f64 } else { 1.0 };
    let half_width = normal::two_sided_critical(opts.level) * adj * (variance / n as f64).sqrt();
    Ok(VarianceEstimate { variance, half_width, ci_low: point - half_width, ci_high: point + half_width })
}

/// As [`variance_with_fit`], fitting the auxiliary OLS regression itself.
pub fn estimate_variance(data: &Dataset, weights: &[f64], point: f64, opts: &ReportOptions) -> Result<VarianceEstimate> {
    let aux = fit_ols(data)?;
    variance_with_fit(data, &aux, weights, point, opts)
}

fn assemble(
    kind: EstimatorKind,
    data: &Dataset,
    aux: &OlsFit,
    weights: &[f64],
    point: f64,
    opts: &ReportOptions,
    mut meta: ReportMeta,
) -> Result<EstimateReport> {
    let v = variance_with_fit(data, aux, weights, point, opts)?;
    meta.max_weight = weights.iter().fold(0.0, |m: f64, g| m.max(g.abs()));
    meta.weight_sum = weights.iter().sum();
    Ok(EstimateReport {
        estimator: kind,
        point,
        variance: v.variance,
        half_width: v.half_width,
        ci_low: v.ci_low,
        ci_high: v.ci_high,
        level: opts.level,
        scaled: opts.scaled,
        meta,
    })
}

/// ψ̂_ML from already-solved weights.
pub fn ml_report(data: &Dataset, weights: &BalanceWeights, aux: &OlsFit, opts: &ReportOptions) -> Result<EstimateReport> {
    let point = rescale(data, weighted_point(data, &weights.gamma), opts.scaled);
    let meta = ReportMeta { jitter: Some(weights.jitter_added), ..Default::default() };
    assemble(EstimatorKind::Ml, data, aux, &weights.gamma, point, opts, meta)
}

/// (n_T/n)Ȳ₀ + n⁻¹ Σ_{W=0} γ̂ᵢ (Yᵢ − Ȳ₀).
pub fn mlt_point(data: &Dataset, gamma: &[f64]) -> Result<f64> {
    let n = data.n() as f64;
    let y0 = data.treated_mean()?;
    let centered: f64 = gamma.iter().zip(data.treated_outcomes()).map(|(g, y)| g * (y - y0)).sum();
    Ok(data.n_target() as f64 / n * y0 + centered / n)
}

/// ψ̂_MLt from already-solved weights. The interval uses the same γ̂ as ML.
pub fn mlt_report(data: &Dataset, weights: &BalanceWeights, aux: &OlsFit, opts: &ReportOptions) -> Result<EstimateReport> {
    let point = rescale(data, mlt_point(data, &weights.gamma)?, opts.scaled);
    let meta = ReportMeta { jitter: Some(weights.jitter_added), ..Default::default() };
    assemble(EstimatorKind::Mlt, data, aux, &weights.gamma, point, opts, meta)
}

pub fn ols_report(data: &Dataset, aux: &OlsFit, opts: &ReportOptions) -> Result<EstimateReport> {
    let raw: f64 = data.target_indices().iter().map(|&i| aux.fitted[i]).sum::<f64>() / data.n() as f64;
    let point = rescale(data, raw, opts.scaled);
    assemble(EstimatorKind::Ols, data, aux, &aux.weights, point, opts, ReportMeta::default())
}

/// 1/ê(Xᵢ) over the `W = 0` units.
pub fn ipw_weights(data: &Dataset, fit: &PropensityFit) -> Vec<f64> {
    data.treated_indices().iter().map(|&i| 1.0 / fit.fitted[i]).collect()
}

fn propensity_meta(data: &Dataset, fit: &PropensityFit) -> ReportMeta {
    let clipped = data
        .treated_indices()
        .iter()
        .filter(|&&i| fit.fitted[i] <= fit.clip)
        .count();
    ReportMeta { propensity_converged: Some(fit.converged), clipped: Some(clipped), ..Default::default() }
}

pub fn ipw_report(data: &Dataset, fit: &PropensityFit, aux: &OlsFit, opts: &ReportOptions) -> Result<EstimateReport> {
    let weights = ipw_weights(data, fit);
    let point = rescale(data, weighted_point(data, &weights), opts.scaled);
    assemble(EstimatorKind::Ipw, data, aux, &weights, point, opts, propensity_meta(data, fit))
}

pub fn aipw_report(data: &Dataset, fit: &PropensityFit, aux: &OlsFit, opts: &ReportOptions) -> Result<EstimateReport> {
    let weights = ipw_weights(data, fit);
    let point = rescale(data, augmented_point(data, &aux.fitted, &weights), opts.scaled);
    assemble(EstimatorKind::Aipw, data, aux, &weights, point, opts, propensity_meta(data, fit))
}

/// Solves the minimax weights for penalty σ (so the ridge term is σ²).
pub fn minimax_weights(data: &Dataset, spec: &KernelSpec, sigma: f64) -> Result<BalanceWeights> {
    check_sigma(sigma)?;
    let blocks = gram_blocks(data, spec)?;
    solve_weights(&blocks, data.n(), sigma * sigma)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

pub fn estimate_ml(data: &Dataset, spec: &KernelSpec, sigma: f64, opts: &ReportOptions) -> Result<EstimateReport> {
    opts.validate()?;
    let weights = minimax_weights(data, spec, sigma)?;
    ml_report(data, &weights, &fit_ols(data)?, opts)
}

pub fn estimate_mlt(data: &Dataset, spec: &KernelSpec, sigma: f64, opts: &ReportOptions) -> Result<EstimateReport> {
    opts.validate()?;
    let weights = minimax_weights(data, spec, sigma)?;
    mlt_report(data, &weights, &fit_ols(data)?, opts)
}

pub fn estimate_ols(data: &Dataset, opts: &ReportOptions) -> Result<EstimateReport> {
    opts.validate()?;
    ols_report(data, &fit_ols(data)?, opts)
}

pub fn estimate_ipw(data: &Dataset, fit: &PropensityFit, opts: &ReportOptions) -> Result<EstimateReport> {
    opts.validate()?;
    ipw_report(data, fit, &fit_ols(data)?, opts)
}

pub fn estimate_aipw(data: &Dataset, fit: &PropensityFit, opts: &ReportOptions) -> Result<EstimateReport> {
    opts.validate()?;
    aipw_report(data, fit, &fit_ols(data)?, opts)
}

/// Effect on the treated: mean outcome of the `W = 1` units minus the
/// rescaled minimax estimate of their mean outcome under `W = 0`.
pub fn estimate_att(data: &Dataset, spec: &KernelSpec, sigma: f64, level: f64) -> Result<EstimateReport> {
    let opts = ReportOptions { level, scaled: true };
    opts.validate()?;
    for (i, (&w, &t)) in data.treatment().iter().zip(data.targets()).enumerate() {
        if w > 1 {
            return Err(Error::Domain(format!("row {i}: treatment {w} is not binary")));
        }
        if t != (w == 1) {
            return Err(Error::Domain(format!("row {i}: target indicator must equal 1{{W=1}}")));
        }
    }
    let target_y: Vec<f64> = data
        .target_indices()
        .iter()
        .map(|&i| data.outcomes()[i].ok_or_else(|| Error::schema(Some(i), "missing outcome on a W=1 unit")))
        .collect::<Result<_>>()?;
    let weights = minimax_weights(data, spec, sigma)?;
    let aux = fit_ols(data)?;

    let nt = data.n_target() as f64;
    let n = data.n() as f64;
    let psi_c = weighted_point(data, &weights.gamma) * n / nt;
    let mean1 = target_y.iter().sum::<f64>() / nt;
    let v1 = target_y.iter().map(|y| y * y).sum::<f64>() / nt - mean1 * mean1;
    let m = &aux.fitted;
    let spread: f64 = data.target_indices().iter().map(|&i| (m[i] - psi_c).powi(2)).sum();
    let noise: f64 = data
        .treated_indices()
        .iter()
        .zip(&weights.gamma)
        .map(|(&i, g)| (g * (data.outcomes()[i].expect("validated") - m[i])).powi(2))
        .sum();
    let variance = v1.max(0.0) + (spread + noise) / nt;
    let point = mean1 - psi_c;
    let half_width = normal::two_sided_critical(level) * (variance / nt).sqrt();
    Ok(EstimateReport {
        estimator: EstimatorKind::Att,
        point,
        variance,
        half_width,
        ci_low: point - half_width,
        ci_high: point + half_width,
        level,
        scaled: true,
        meta: ReportMeta {
            jitter: Some(weights.jitter_added),
            max_weight: weights.max_abs(),
            weight_sum: weights.sum(),
            ..Default::default()
        },
    })
}

/// Runs one estimator by kind with fresh nuisance fits.
pub fn estimate(
    kind: EstimatorKind,
    data: &Dataset,
    spec: &KernelSpec,
    sigma: f64,
    opts: &ReportOptions,
) -> Result<EstimateReport> {
    match kind {
        EstimatorKind::Ml => estimate_ml(data, spec, sigma, opts),
        EstimatorKind::Mlt => estimate_mlt(data, spec, sigma, opts),
        EstimatorKind::Ols => estimate_ols(data, opts),
        EstimatorKind::Ipw => estimate_ipw(data, &fit_logistic(data)?, opts),
        EstimatorKind::Aipw => estimate_aipw(data, &fit_logistic(data)?, opts),
        EstimatorKind::Att => estimate_att(data, spec, sigma, opts.level),
    }
}
