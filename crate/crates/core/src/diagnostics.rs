//! Post-hoc diagnostics: empirical Gram spectra and their decay rate,
//! recovery of the Riesz representer by the minimax weights, and
//! worst-case imbalance of competing weight sets.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{gram_blocks, GramBlocks, KernelSpec};
use crate::solver::{balance_norm, objective, solve_weights};

/// Eigenvalues at or below this fraction of the largest are treated as zero.
pub const RANK_CUTOFF: f64 = 1e-10;
/// Leading eigenvalues excluded from the decay fit.
const FIT_START: usize = 3;
const MIN_BLOCK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Treated,
    Target,
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Block::Treated => "treated",
            Block::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Eigenvalues of K/m in decreasing order, negatives from rounding clamped to 0.
    pub eigenvalues: Vec<f64>,
    /// Number of eigenvalues above `RANK_CUTOFF · λ₁`.
    pub numeric_rank: usize,
    /// α̂ in λ_j ≈ C j^(−α), fitted on log–log scale.
    pub fitted_alpha: Option<f64>,
    /// 1-based inclusive index range used for the fit.
    pub fit_range: Option<(usize, usize)>,
}

/// Spectrum of the selected Gram block divided by its size.
pub fn spectrum(blocks: &GramBlocks, which: Block) -> Result<SpectrumReport> {
    let k = match which {
        Block::Treated => &blocks.zz,
        Block::Target => &blocks.tt,
    };
    if k.nrows() == 0 {
        return Err(Error::Domain(format!("{which} block is empty")));
    }
    Ok(spectrum_of_gram(k))
}

/// Spectrum of an arbitrary symmetric Gram matrix divided by its size.
pub fn spectrum_of_gram(k: &DMatrix<f64>) -> SpectrumReport {
    let m = k.nrows();
    let scaled = k / m as f64;
    let mut ev: Vec<f64> = scaled.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let top = ev.first().copied().unwrap_or(0.0).max(0.0);
    for v in ev.iter_mut() {
        *v = v.max(0.0);
    }
    let numeric_rank = if top > 0.0 { ev.iter().take_while(|&&v| v > RANK_CUTOFF * top).count() } else { 0 };

    let mut fitted_alpha = None;
    let mut fit_range = None;
    if m >= MIN_BLOCK && numeric_rank >= FIT_START + 1 {
        let (lo, hi) = (FIT_START, numeric_rank);
        let pts: Vec<(f64, f64)> = (lo..=hi).map(|j| ((j as f64).ln(), ev[j - 1].ln())).collect();
        let slope = least_squares_slope(&pts);
        if slope.is_finite() {
            fitted_alpha = Some(-slope);
            fit_range = Some((lo, hi));
        }
    }
    SpectrumReport { eigenvalues: ev, numeric_rank, fitted_alpha, fit_range }
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Mean squared distance between two weight sequences.
pub fn mean_squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("sequences of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Domain("empty weight sequence".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// n_Z⁻¹ Σ_{W=0} (γ̂ᵢ − g(Xᵢ))² for the minimax weights at penalty σ and a
/// known representer `g_true` evaluated on raw covariate rows.
pub fn riesz_recovery(data: &Dataset, spec: &KernelSpec, sigma: f64, g_true: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let blocks = gram_blocks(data, spec)?;
    let w = solve_weights(&blocks, data.n(), sigma * sigma)?;
    let truth: Vec<f64> = data.treated_indices().iter().map(|&i| g_true(&data.row(i))).collect();
    mean_squared_distance(&w.gamma, &truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceRow {
    pub name: String,
    /// Worst-case imbalance I(γ); `None` when the set was rejected.
    pub imbalance: Option<f64>,
    pub l2_norm: Option<f64>,
    pub objective: Option<f64>,
    /// Reason the set was rejected, e.g. a length mismatch.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceTable {
    pub rows: Vec<ImbalanceRow>,
    /// Whether the minimax row attains the smallest objective (within 1e-10 relative slack).
    pub minimax_is_minimal: bool,
}

/// Name under which the minimax weights appear in [`compare_imbalance`].
pub const MINIMAX_ROW: &str = "minimax";

/// Evaluates each weight set against the minimax weights at penalty σ.
/// The first row is always the minimax solution.
pub fn compare_imbalance(
    data: &Dataset,
    spec: &KernelSpec,
    sigma: f64,
    sets: &[(String, Vec<f64>)],
) -> Result<ImbalanceTable> {
    let blocks = gram_blocks(data, spec)?;
    compare_on_blocks(&blocks, data.n(), sigma * sigma, sets)
}

pub fn compare_on_blocks(
    blocks: &GramBlocks,
    n_total: usize,
    sigma2: f64,
    sets: &[(String, Vec<f64>)],
) -> Result<ImbalanceTable> {
    let w = solve_weights(blocks, n_total, sigma2)?;
    let mut rows = vec![ImbalanceRow {
        name: MINIMAX_ROW.into(),
        imbalance: Some(w.imbalance),
        l2_norm: Some(norm(&w.gamma)),
        objective: Some(w.objective),
        flag: None,
    }];
    for (name, gamma) in sets {
        if gamma.len() != blocks.n_treated() {
            rows.push(ImbalanceRow {
                name: name.clone(),
                imbalance: None,
                l2_norm: None,
                objective: None,
                flag: Some(format!("length {} does not match {} W=0 units", gamma.len(), blocks.n_treated())),
            });
            continue;
        }
        rows.push(ImbalanceRow {
            name: name.clone(),
            imbalance: Some(balance_norm(blocks, gamma, n_total)?),
            l2_norm: Some(norm(gamma)),
            objective: Some(objective(blocks, gamma, n_total, sigma2)?),
            flag: None,
        });
    }
    let best = w.objective;
    let minimax_is_minimal = rows
        .iter()
        .filter_map(|r| r.objective)
        .all(|o| best <= o + 1e-10 * (1.0 + o.abs()));
    Ok(ImbalanceTable { rows, minimax_is_minimal })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The default comparison sets: all zeros and all ones.
pub fn default_sets(n_treated: usize) -> Vec<(String, Vec<f64>)> {
    vec![("zeros".into(), vec![0.0; n_treated]), ("ones".into(), vec![1.0; n_treated])]
}
