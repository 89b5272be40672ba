//! Kernel functions and Gram-block construction.
//!
//! Covariates are optionally standardized with the column means and sample
//! standard deviations of the full sample, then divided by the lengthscale
//! before distances are taken. Matérn kernels are available for the three
//! half-integer smoothness levels that have closed forms.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Matern,
    Linear,
    Gaussian,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "matern" => Ok(KernelFamily::Matern),
            "linear" => Ok(KernelFamily::Linear),
            "gaussian" | "rbf" => Ok(KernelFamily::Gaussian),
            other => Err(Error::Config(format!("unknown kernel family {other:?}"))),
        }
    }
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelFamily::Matern => "matern",
            KernelFamily::Linear => "linear",
            KernelFamily::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Matérn smoothness; ignored by the other families.
    pub nu: f64,
    pub lengthscale: f64,
    pub standardize: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { family: KernelFamily::Matern, nu: 1.5, lengthscale: 1.0, standardize: true }
    }
}

impl KernelSpec {
    pub fn matern(nu: f64) -> Self {
        KernelSpec { nu, ..Default::default() }
    }

    pub fn linear() -> Self {
        KernelSpec { family: KernelFamily::Linear, standardize: false, ..Default::default() }
    }

    pub fn gaussian(lengthscale: f64) -> Self {
        KernelSpec { family: KernelFamily::Gaussian, lengthscale, ..Default::default() }
    }

    pub fn with_lengthscale(self, lengthscale: f64) -> Self {
        KernelSpec { lengthscale, ..self }
    }

    pub fn with_standardize(self, standardize: bool) -> Self {
        KernelSpec { standardize, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::Config(format!("lengthscale must be positive, got {}", self.lengthscale)));
        }
        if self.family == KernelFamily::Matern {
            MaternOrder::from_nu(self.nu)?;
        }
        Ok(())
    }

    /// Fits the column standardization on `x` and returns an evaluator.
    pub fn prepare(&self, x: &DMatrix<f64>) -> Result<PreparedKernel> {
        self.validate()?;
        let d = x.ncols();
        let (shift, scale) = if self.standardize {
            column_moments(x)
        } else {
            (vec![0.0; d], vec![1.0; d])
        };
        let scale = scale.into_iter().map(|s| s * self.lengthscale).collect();
        let profile = match self.family {
            KernelFamily::Matern => Profile::Matern(MaternOrder::from_nu(self.nu)?),
            KernelFamily::Gaussian => Profile::Gaussian,
            KernelFamily::Linear => Profile::Linear,
        };
        Ok(PreparedKernel { profile, shift, scale })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MaternOrder {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternOrder {
    fn from_nu(nu: f64) -> Result<Self> {
        if nu == 0.5 {
            Ok(MaternOrder::Half)
        } else if nu == 1.5 {
            Ok(MaternOrder::ThreeHalves)
        } else if nu == 2.5 {
            Ok(MaternOrder::FiveHalves)
        } else {
            Err(Error::Config(format!("unsupported Matérn nu {nu} (supported: 0.5, 1.5, 2.5)")))
        }
    }

    #[inline]
    fn eval(self, r: f64) -> f64 {
        match self {
            MaternOrder::Half => (-r).exp(),
            MaternOrder::ThreeHalves => {
                let s = 3f64.sqrt() * r;
                (1.0 + s) * (-s).exp()
            }
            MaternOrder::FiveHalves => {
                let s = 5f64.sqrt() * r;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        }
    }
}

/// Matérn correlation k_ν(r) with the `√(2ν) r` argument scaling.
pub fn matern_kernel(r: f64, nu: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::Domain(format!("distance must be nonnegative, got {r}")));
    }
    Ok(MaternOrder::from_nu(nu)?.eval(r))
}

/// Column means and sample standard deviations. Constant columns keep scale 1.
fn column_moments(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows();
    let mut shift = Vec::with_capacity(x.ncols());
    let mut scale = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
        shift.push(mean);
        scale.push(if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 });
    }
    (shift, scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Profile {
    Matern(MaternOrder),
    Gaussian,
    Linear,
}

/// A kernel with its input transformation frozen.
#[derive(Debug, Clone)]
pub struct PreparedKernel {
    profile: Profile,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl PreparedKernel {
    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// Maps a raw covariate row into kernel coordinates.
    pub fn transform(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Kernel value between two points already in kernel coordinates.
    #[inline]
    pub fn eval_transformed(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.profile {
            Profile::Linear => a.iter().zip(b).map(|(u, v)| u * v).sum(),
            Profile::Gaussian => (-0.5 * sq_dist(a, b)).exp(),
            Profile::Matern(order) => order.eval(sq_dist(a, b).sqrt()),
        }
    }

    /// Kernel value between two raw covariate rows.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.eval_transformed(&self.transform(a), &self.transform(b))
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Points in kernel coordinates, stored row-major.
#[derive(Debug, Clone)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    fn gather(kernel: &PreparedKernel, x: &DMatrix<f64>, rows: &[usize]) -> Self {
        let dim = x.ncols();
        let mut coords = Vec::with_capacity(rows.len() * dim);
        for &i in rows {
            let raw: Vec<f64> = x.row(i).iter().copied().collect();
            coords.extend(kernel.transform(&raw));
        }
        PointSet { dim, coords }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.coords.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }
}

/// Gram matrices over the `W = 0` units (Z) and the target units (T).
#[derive(Debug, Clone)]
pub struct GramBlocks {
    pub zz: DMatrix<f64>,
    pub zt: DMatrix<f64>,
    pub tt: DMatrix<f64>,
    pub kernel: PreparedKernel,
    pub treated: Vec<usize>,
    pub target: Vec<usize>,
    treated_points: Vec<Vec<f64>>,
    features: Option<LinearFeatures>,
}

/// Explicit feature map of a linear kernel: K_ZZ = Φ Φᵀ and K_ZT 1 = Φ s.
#[derive(Debug, Clone)]
pub struct LinearFeatures {
    /// Φ, one row per `W = 0` unit.
    pub phi: DMatrix<f64>,
    /// Sum of the target points' features.
    pub target_sum: Vec<f64>,
}

impl GramBlocks {
    pub fn n_treated(&self) -> usize {
        self.zz.nrows()
    }

    pub fn n_target(&self) -> usize {
        self.tt.nrows()
    }

    /// `W = 0` points in kernel coordinates.
    pub fn treated_points(&self) -> &[Vec<f64>] {
        &self.treated_points
    }

    /// 1ᵀ K_TT 1.
    pub fn target_mass(&self) -> f64 {
        self.tt.iter().sum()
    }

    /// K_ZT 1.
    pub fn target_embedding(&self) -> Vec<f64> {
        self.zt.row_iter().map(|r| r.iter().sum()).collect()
    }

    /// Feature form of a linear kernel, kept only when it has fewer columns
    /// than there are `W = 0` units.
    pub fn linear_features(&self) -> Option<&LinearFeatures> {
        self.features.as_ref()
    }

    /// Multiplies every block by `c`, i.e. uses the kernel `c·K`.
    pub fn scaled(mut self, c: f64) -> Self {
        self.zz *= c;
        self.zt *= c;
        self.tt *= c;
        if let Some(f) = &mut self.features {
            let r = c.sqrt();
            f.phi *= r;
            f.target_sum.iter_mut().for_each(|v| *v *= r);
        }
        self
    }
}

/// Builds K_ZZ, K_ZT and K_TT for `data` under `spec`.
pub fn gram_blocks(data: &Dataset, spec: &KernelSpec) -> Result<GramBlocks> {
    data.require_groups()?;
    let x = data.covariates();
    let kernel = spec.prepare(x)?;
    let z = PointSet::gather(&kernel, x, data.treated_indices());
    let t = PointSet::gather(&kernel, x, data.target_indices());
    let nz = data.n_treated();
    let nt = data.n_target();

    let zz = symmetric_gram(&kernel, &z, nz);
    let tt = symmetric_gram(&kernel, &t, nt);
    let zt = DMatrix::from_fn(nz, nt, |i, j| kernel.eval_transformed(z.point(i), t.point(j)));
    let treated_points = (0..nz).map(|i| z.point(i).to_vec()).collect();
    let d = kernel.dim();
    let features = (kernel.profile == Profile::Linear && d < nz).then(|| LinearFeatures {
        phi: DMatrix::from_fn(nz, d, |i, k| z.point(i)[k]),
        target_sum: (0..d).map(|k| (0..nt).map(|j| t.point(j)[k]).sum()).collect(),
    });

    Ok(GramBlocks {
        zz,
        zt,
        tt,
        kernel,
        treated: data.treated_indices().to_vec(),
        target: data.target_indices().to_vec(),
        treated_points,
        features,
    })
}

fn symmetric_gram(kernel: &PreparedKernel, pts: &PointSet, m: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(m, m);
    for j in 0..m {
        for i in 0..=j {
            let v = kernel.eval_transformed(pts.point(i), pts.point(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Full Gram matrix of a raw point set under `spec` (standardization fitted on `x`).
pub fn gram_matrix(x: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let kernel = spec.prepare(x)?;
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let pts = PointSet::gather(&kernel, x, &rows);
    Ok(symmetric_gram(&kernel, &pts, x.nrows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_names, TargetRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// K_ν(z) = ∫₀^∞ exp(−z cosh s) cosh(νs) ds by the trapezoid rule, which
    /// converges geometrically for this integrand.
    fn bessel_k(nu: f64, z: f64) -> f64 {
        let h: f64 = 1e-3;
        let mut total = 0.5 * (-z).exp();
        let mut s: f64 = h;
        loop {
            let term = (-z * s.cosh()).exp() * (nu * s).cosh();
            total += term;
            if term < 1e-30 {
                break;
            }
            s += h;
        }
        total * h
    }

    fn gamma_half_integer(nu: f64) -> f64 {
        // Γ(1/2) = √π and Γ(x+1) = xΓ(x).
        let mut g = std::f64::consts::PI.sqrt();
        let mut x = 0.5;
        while x < nu - 1e-12 {
            g *= x;
            x += 1.0;
        }
        g
    }

    fn matern_bessel_form(r: f64, nu: f64) -> f64 {
        let a = (2.0 * nu).sqrt() * r;
        a.powf(nu) / (2f64.powf(nu - 1.0) * gamma_half_integer(nu)) * bessel_k(nu, a)
    }

    #[test]
    fn matern_hand_values() {
        assert_eq!(matern_kernel(0.0, 1.5).unwrap(), 1.0);
        assert!((matern_kernel(1.0, 0.5).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
        let want = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        assert!((matern_kernel(1.0, 1.5).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.483_357_724_596_507_6).abs() < 1e-15);
    }

    #[test]
    fn matern_closed_forms_match_bessel_definition() {
        for &nu in &[0.5, 1.5, 2.5] {
            for &r in &[0.05, 0.3, 1.0, 2.2, 4.0] {
                let closed = matern_kernel(r, nu).unwrap();
                let oracle = matern_bessel_form(r, nu);
                assert!((closed - oracle).abs() <= 1e-10, "nu={nu} r={r}: {closed} vs {oracle}");
            }
        }
    }

    #[test]
    fn matern_rejects_unsupported_nu() {
        assert!(matches!(matern_kernel(1.0, 1.0), Err(Error::Config(_))));
        assert!(KernelSpec::matern(3.5).validate().is_err());
        assert!(KernelSpec::default().with_lengthscale(0.0).validate().is_err());
    }

    #[test]
    fn matern_is_bounded_and_nonincreasing() {
        for &nu in &[0.5, 1.5, 2.5] {
            let mut prev = 1.0;
            for k in 0..400 {
                let v = matern_kernel(k as f64 * 0.05, nu).unwrap();
                assert!(v > 0.0 && v <= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn half_order_is_exponential_in_scaled_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a: f64 = rng.random_range(-3.0..3.0);
            let b: f64 = rng.random_range(-3.0..3.0);
            let ell: f64 = rng.random_range(0.2..4.0);
            let spec = KernelSpec::matern(0.5).with_lengthscale(ell).with_standardize(false);
            let k = spec.prepare(&DMatrix::zeros(1, 1)).unwrap();
            let want = (-(a - b).abs() / ell).exp();
            assert!((k.eval(&[a], &[b]) - want).abs() < 1e-14);
        }
    }

    fn dataset(x: DMatrix<f64>, w: Vec<u32>) -> Dataset {
        let y = w.iter().map(|&wi| if wi == 0 { Some(0.0) } else { None }).collect();
        Dataset::with_rule(x.clone(), w, y, TargetRule::All, default_names(x.ncols())).unwrap()
    }

    #[test]
    fn identical_points_fill_blocks_with_one() {
        let x = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.3, -1.0]);
        let g = gram_blocks(&dataset(x, vec![0, 1]), &KernelSpec::default()).unwrap();
        assert!(g.zz.iter().chain(g.zt.iter()).chain(g.tt.iter()).all(|&v| v == 1.0));
    }

    #[test]
    fn linear_kernel_on_unit_vectors() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let g = gram_blocks(&dataset(x, vec![0, 0]), &KernelSpec::linear()).unwrap();
        assert_eq!(g.zz, DMatrix::identity(2, 2));
    }

    #[test]
    fn requires_both_groups() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let data = Dataset::new(x, vec![1, 1], vec![Some(0.0); 2], vec![true, true], default_names(1)).unwrap();
        assert!(matches!(gram_blocks(&data, &KernelSpec::default()), Err(Error::Domain(_))));
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let data = Dataset::new(x, vec![0, 0], vec![Some(0.0); 2], vec![false, false], default_names(1)).unwrap();
        assert!(matches!(gram_blocks(&data, &KernelSpec::default()), Err(Error::Domain(_))));
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn blocks_match_direct_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_x(&mut rng, 5, 3);
        let w = vec![0, 1, 0, 1, 0];
        let t = vec![true, true, false, true, false];
        let y = w.iter().map(|&wi| if wi == 0 { Some(1.0) } else { None }).collect();
        let data = Dataset::new(x.clone(), w.clone(), y, t.clone(), default_names(3)).unwrap();
        let spec = KernelSpec::matern(1.5).with_lengthscale(0.7);
        let g = gram_blocks(&data, &spec).unwrap();

        // Direct oracle: standardize by hand, then evaluate pair by pair.
        let n = 5;
        let mut z = x.clone();
        for j in 0..3 {
            let mean = (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64;
            let sd = ((0..n).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            for i in 0..n {
                z[(i, j)] = (x[(i, j)] - mean) / sd / 0.7;
            }
        }
        let k = |a: usize, b: usize| {
            let r = (0..3).map(|j| (z[(a, j)] - z[(b, j)]).powi(2)).sum::<f64>().sqrt();
            (1.0 + 3f64.sqrt() * r) * (-(3f64.sqrt()) * r).exp()
        };
        let zi: Vec<usize> = (0..n).filter(|&i| w[i] == 0).collect();
        let ti: Vec<usize> = (0..n).filter(|&i| t[i]).collect();
        for (a, &i) in zi.iter().enumerate() {
            for (b, &j) in zi.iter().enumerate() {
                assert!((g.zz[(a, b)] - k(i, j)).abs() < 1e-12);
            }
            for (b, &j) in ti.iter().enumerate() {
                assert!((g.zt[(a, b)] - k(i, j)).abs() < 1e-12);
            }
        }
        for (a, &i) in ti.iter().enumerate() {
            for (b, &j) in ti.iter().enumerate() {
                assert!((g.tt[(a, b)] - k(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_is_symmetric_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(n, d) in &[(30, 1), (80, 3), (200, 5)] {
            let x = random_x(&mut rng, n, d);
            for spec in [KernelSpec::default(), KernelSpec::matern(0.5), KernelSpec::gaussian(1.0)] {
                let g = gram_matrix(&x, &spec).unwrap();
                assert_eq!(g, g.transpose());
                let min = g.clone().symmetric_eigenvalues().min();
                assert!(min >= -1e-8 * g.trace(), "min eigenvalue {min}");
            }
        }
    }

    #[test]
    fn standardization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_x(&mut rng, 40, 3) * 5.0;
        let spec = KernelSpec::default();
        let k = spec.prepare(&x).unwrap();
        let xs = DMatrix::from_fn(40, 3, |i, j| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            k.transform(&row)[j]
        });
        let g1 = gram_matrix(&x, &spec).unwrap();
        let g2 = gram_matrix(&xs, &spec).unwrap();
        assert!((g1 - g2).abs().max() < 1e-12);
    }

    #[test]
    fn constant_columns_are_centered_not_scaled() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 2.0, 4.0, 3.0, 4.0]);
        let k = KernelSpec::default().prepare(&x).unwrap();
        assert_eq!(k.transform(&[2.0, 5.0]), vec![0.0, 1.0]);
    }
}
