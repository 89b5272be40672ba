//! Simulation designs and a deterministic replication harness.
//!
//! Randomness: each replication `r` of a cell draws from a ChaCha8 stream
//! seeded with `base_seed ^ r` through `seed_from_u64`. Standard normals are
//! produced by inverting 53-bit uniforms on the open interval (0, 1) with
//! [`normal::quantile`], so tables are bit-reproducible on any platform with
//! IEEE doubles. Replications may run on several threads but are aggregated
//! in index order, so summaries do not depend on scheduling.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{default_names, Dataset, TargetRule};
use crate::error::{Error, Result};
use crate::estimators::{
    aipw_report, ipw_report, ml_report, mlt_report, ols_report, EstimateReport, EstimatorKind, ReportOptions,
};
use crate::kernels::{gram_blocks, KernelSpec};
use crate::normal;
use crate::regression::{fit_logistic, fit_ols};
use crate::solver::solve_weights;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "KB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    KangSchafer,
    Hainmueller,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::KangSchafer => "kang_schafer",
            Family::Hainmueller => "hainmueller",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "kang_schafer" | "ks" => Ok(Family::KangSchafer),
            "hainmueller" | "hm" => Ok(Family::Hainmueller),
            other => Err(Error::Config(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OutcomeDesign {
    D1,
    D2,
    D3,
}

impl std::fmt::Display for OutcomeDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutcomeDesign::D1 => "d1",
            OutcomeDesign::D2 => "d2",
            OutcomeDesign::D3 => "d3",
        })
    }
}

impl std::str::FromStr for OutcomeDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "d1" | "1" => Ok(OutcomeDesign::D1),
            "d2" | "2" => Ok(OutcomeDesign::D2),
            "d3" | "3" => Ok(OutcomeDesign::D3),
            other => Err(Error::Config(format!("unknown outcome design {other:?}"))),
        }
    }
}

/// One simulation design. `eta` and `design` are ignored for Kang–Schafer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpSpec {
    pub family: Family,
    pub n: usize,
    pub sigma_eps: f64,
    pub eta: f64,
    pub design: OutcomeDesign,
    pub seed: u64,
}

impl DgpSpec {
    pub fn kang_schafer(n: usize, sigma_eps: f64, seed: u64) -> Self {
        DgpSpec { family: Family::KangSchafer, n, sigma_eps, eta: 1.0, design: OutcomeDesign::D1, seed }
    }

    pub fn hainmueller(n: usize, sigma_eps: f64, eta: f64, design: OutcomeDesign, seed: u64) -> Self {
        DgpSpec { family: Family::Hainmueller, n, sigma_eps, eta, design, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eps.is_finite()) {
            return Err(Error::Config(format!("sigma_eps must be nonnegative, got {}", self.sigma_eps)));
        }
        if self.family == Family::Hainmueller && !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        DgpSpec { seed, ..self }
    }

    /// Population value of E m(X, 0), known in closed form for every design.
    pub fn truth(&self) -> f64 {
        match (self.family, self.design) {
            (Family::KangSchafer, _) => 210.0,
            (Family::Hainmueller, OutcomeDesign::D1) => 1.5,
            (Family::Hainmueller, OutcomeDesign::D2) => -(2.0 / std::f64::consts::PI).sqrt(),
            (Family::Hainmueller, OutcomeDesign::D3) => 8.0,
        }
    }
}

/// A generated sample plus the quantities only a simulator knows.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub data: Dataset,
    /// True P{W = 0 | X} per unit.
    pub propensity: Vec<f64>,
    /// Noise-free m(X, 0) per unit.
    pub mean_outcome: Vec<f64>,
}

impl SimDraw {
    /// True Riesz representer 1/P{W = 0 | X} on the `W = 0` units (all units are targets).
    pub fn riesz_on_treated(&self) -> Vec<f64> {
        self.data.treated_indices().iter().map(|&i| 1.0 / self.propensity[i]).collect()
    }
}

/// Seeded source of uniforms and normals with the documented transforms.
pub struct Draws {
    rng: ChaCha8Rng,
}

impl Draws {
    pub fn new(seed: u64) -> Self {
        Draws { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform on the open interval (0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        normal::quantile(self.uniform())
    }
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

fn assemble(x: DMatrix<f64>, w: Vec<u32>, y: Vec<Option<f64>>) -> Dataset {
    let d = x.ncols();
    Dataset::with_rule(x, w, y, TargetRule::All, default_names(d)).expect("generated data satisfies the dataset contract")
}

/// Kang–Schafer design: four observed nonlinear transforms of latent
/// standard normals, logistic selection and a linear latent outcome.
pub fn gen_kang_schafer(spec: &DgpSpec) -> Result<SimDraw> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = Draws::new(spec.seed);
    let mut x = DMatrix::zeros(n, 4);
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    let mut mean_outcome = Vec::with_capacity(n);
    for i in 0..n {
        let z = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        x[(i, 0)] = (z[0] / 2.0).exp();
        x[(i, 1)] = z[1] / (1.0 + z[0].exp() + 10.0);
        x[(i, 2)] = (z[0] * z[2] / 25.0 + 0.06).powi(3);
        x[(i, 3)] = (z[1] + z[3] + 20.0).powi(2);
        let p0 = logistic(-z[0] + 0.5 * z[1] - 0.25 * z[2] - 0.1 * z[3]);
        let wi = if rng.uniform() < p0 { 0 } else { 1 };
        let m = 210.0 + 27.4 * z[0] + 13.7 * (z[1] + z[2] + z[3]);
        let eps = rng.normal();
        w.push(wi);
        y.push((wi == 0).then_some(m + spec.sigma_eps * eps));
        propensity.push(p0);
        mean_outcome.push(m);
    }
    Ok(SimDraw { data: assemble(x, w, y), propensity, mean_outcome })
}

fn hainmueller_cholesky() -> Matrix3<f64> {
    let sigma = Matrix3::new(2.0, 1.0, -1.0, 1.0, 1.0, -0.5, -1.0, -0.5, 1.0);
    sigma.cholesky().expect("covariance is positive definite").l()
}

/// Hainmueller design: correlated normals, a uniform, a χ²₁ and a
/// Bernoulli covariate with probit selection of scale `eta`.
pub fn gen_hainmueller(spec: &DgpSpec) -> Result<SimDraw> {
    spec.validate()?;
    let n = spec.n;
    let l = hainmueller_cholesky();
    let mut rng = Draws::new(spec.seed);
    let mut x = DMatrix::zeros(n, 6);
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    let mut mean_outcome = Vec::with_capacity(n);
    for i in 0..n {
        let z = nalgebra::Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let c = l * z;
        let x4 = -3.0 + 6.0 * rng.uniform();
        let x5 = rng.normal().powi(2);
        let x6 = if rng.uniform() < 0.5 { 1.0 } else { 0.0 };
        let row = [c[0], c[1], c[2], x4, x5, x6];
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
        let index = row[0] + 2.0 * row[1] - 2.0 * row[2] - row[3] - 0.5 * row[4] + row[5];
        let p0 = normal::cdf(index / spec.eta);
        let wi = if rng.uniform() < p0 { 0 } else { 1 };
        let m = match spec.design {
            OutcomeDesign::D1 => row[0] + row[1] + row[2] - row[3] + row[4] + row[5],
            OutcomeDesign::D2 => row[0] + row[1] + 0.2 * row[2] * row[3] - row[4].sqrt(),
            OutcomeDesign::D3 => (row[0] + row[1] + row[4]).powi(2),
        };
        let eps = rng.normal();
        w.push(wi);
        y.push((wi == 0).then_some(m + spec.sigma_eps * eps));
        propensity.push(p0);
        mean_outcome.push(m);
    }
    Ok(SimDraw { data: assemble(x, w, y), propensity, mean_outcome })
}

pub fn generate(spec: &DgpSpec) -> Result<SimDraw> {
    match spec.family {
        Family::KangSchafer => gen_kang_schafer(spec),
        Family::Hainmueller => gen_hainmueller(spec),
    }
}

/// Uniform covariates on [0, 1]^d with `W` and `T` drawn independently of
/// `X` and of each other, `P{W = 0} = P{T = 1} = p`. The Riesz representer
/// of the target mean is then identically 1.
pub fn gen_independent_uniform(n: usize, d: usize, p: f64, seed: u64) -> Result<Dataset> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("p must lie in (0, 1), got {p}")));
    }
    let mut rng = Draws::new(seed);
    let mut x = DMatrix::zeros(n, d);
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = rng.uniform();
        }
        let wi = if rng.uniform() < p { 0 } else { 1 };
        t.push(rng.uniform() < p);
        let eps = rng.normal();
        w.push(wi);
        y.push((wi == 0).then_some((3.0 * x[(i, 0)]).sin() + 0.1 * eps));
    }
    Dataset::new(x, w, y, t, default_names(d))
}

/// Monte Carlo estimate of E m(X, 0) and its standard error from `draws`
/// noise-free population draws.
pub fn monte_carlo_truth(spec: &DgpSpec, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let big = DgpSpec { n: draws, seed, ..*spec };
    let sample = generate(&big)?.mean_outcome;
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Settings shared by every replication of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub kernel: KernelSpec,
    /// Kernel penalty σ (the solver uses σ²).
    pub sigma: f64,
    pub level: f64,
    pub estimators: Vec<EstimatorKind>,
    /// Worker-thread cap; `None` reads `KB_THREADS`, then uses all cores.
    pub threads: Option<usize>,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            kernel: KernelSpec::default(),
            sigma: 0.1,
            level: 0.95,
            estimators: EstimatorKind::ROSTER.to_vec(),
            threads: None,
        }
    }
}

/// Aggregated performance of one estimator in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSummary {
    pub family: Family,
    pub n: usize,
    pub sigma_eps: f64,
    pub eta: Option<f64>,
    pub design: Option<OutcomeDesign>,
    pub estimator: EstimatorKind,
    /// Kernel penalty, reported only for estimators that use it.
    pub sigma: Option<f64>,
    pub replications: usize,
    pub failures: usize,
    pub truth: f64,
    pub rmse: f64,
    pub bias: f64,
    pub mean_half_width: f64,
    pub coverage: f64,
}

impl SimulationSummary {
    /// Standard deviation of the estimates across successful replications.
    pub fn spread(&self) -> f64 {
        (self.rmse * self.rmse - self.bias * self.bias).max(0.0).sqrt()
    }
}

/// Performance statistics over replications; failed replications are skipped
/// and counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub replications: usize,
    pub failures: usize,
    pub rmse: f64,
    pub bias: f64,
    pub mean_half_width: f64,
    pub coverage: f64,
}

pub fn aggregate(truth: f64, results: &[Result<EstimateReport>]) -> Aggregate {
    let ok: Vec<&EstimateReport> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let k = ok.len() as f64;
    let failures = results.len() - ok.len();
    if ok.is_empty() {
        return Aggregate {
            replications: 0,
            failures,
            rmse: f64::NAN,
            bias: f64::NAN,
            mean_half_width: f64::NAN,
            coverage: f64::NAN,
        };
    }
    let mean = ok.iter().map(|r| r.point).sum::<f64>() / k;
    let mse = ok.iter().map(|r| (r.point - truth).powi(2)).sum::<f64>() / k;
    Aggregate {
        replications: ok.len(),
        failures,
        rmse: mse.sqrt(),
        bias: mean - truth,
        mean_half_width: ok.iter().map(|r| r.half_width).sum::<f64>() / k,
        coverage: ok.iter().filter(|r| r.covers(truth)).count() as f64 / k,
    }
}

/// Every requested estimator on one draw, sharing nuisance fits.
pub fn estimate_all(data: &Dataset, settings: &SimSettings) -> Vec<Result<EstimateReport>> {
    let opts = ReportOptions { level: settings.level, scaled: true };
    let aux = fit_ols(data);
    let needs_kernel = settings.estimators.iter().any(|k| matches!(k, EstimatorKind::Ml | EstimatorKind::Mlt));
    let needs_propensity = settings.estimators.iter().any(|k| matches!(k, EstimatorKind::Ipw | EstimatorKind::Aipw));
    let weights = needs_kernel.then(|| {
        let blocks = gram_blocks(data, &settings.kernel)?;
        solve_weights(&blocks, data.n(), settings.sigma * settings.sigma)
    });
    let propensity = needs_propensity.then(|| fit_logistic(data));

    fn clone_err<T>(r: &Result<T>) -> Result<&T> {
        r.as_ref().map_err(|e| Error::Domain(e.to_string()))
    }

    settings
        .estimators
        .iter()
        .map(|kind| {
            let aux = clone_err(&aux)?;
            match kind {
                EstimatorKind::Ml => ml_report(data, clone_err(weights.as_ref().expect("requested"))?, aux, &opts),
                EstimatorKind::Mlt => mlt_report(data, clone_err(weights.as_ref().expect("requested"))?, aux, &opts),
                EstimatorKind::Ols => ols_report(data, aux, &opts),
                EstimatorKind::Ipw => ipw_report(data, clone_err(propensity.as_ref().expect("requested"))?, aux, &opts),
                EstimatorKind::Aipw => aipw_report(data, clone_err(propensity.as_ref().expect("requested"))?, aux, &opts),
                EstimatorKind::Att => Err(Error::Config("ATT is not available in simulations".into())),
            }
        })
        .collect()
}

/// Thread count: explicit setting, else `KB_THREADS`, else all cores.
pub fn thread_count(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `reps` replications of `dgp` and summarizes each estimator.
/// Replication `r` uses seed `base_seed ^ r`; `dgp.seed` is ignored.
pub fn run_replications(
    dgp: &DgpSpec,
    settings: &SimSettings,
    reps: usize,
    base_seed: u64,
) -> Result<Vec<SimulationSummary>> {
    dgp.validate()?;
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if !(settings.sigma > 0.0 && settings.sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {}", settings.sigma)));
    }
    ReportOptions { level: settings.level, scaled: true }.validate()?;
    settings.kernel.validate()?;
    if settings.estimators.contains(&EstimatorKind::Att) {
        return Err(Error::Config("ATT is not available in simulations".into()));
    }

    let one = |r: usize| -> Vec<Result<EstimateReport>> {
        match generate(&dgp.with_seed(base_seed ^ r as u64)) {
            Ok(draw) => estimate_all(&draw.data, settings),
            Err(e) => settings.estimators.iter().map(|_| Err(Error::Domain(e.to_string()))).collect(),
        }
    };
    let threads = thread_count(settings.threads);
    let per_rep: Vec<Vec<Result<EstimateReport>>> = if threads <= 1 {
        (0..reps).map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..reps).into_par_iter().map(one).collect())
    };

    let truth = dgp.truth();
    let hainmueller = dgp.family == Family::Hainmueller;
    let mut out = Vec::with_capacity(settings.estimators.len());
    for (k, kind) in settings.estimators.iter().enumerate() {
        let column: Vec<Result<EstimateReport>> = per_rep
            .iter()
            .map(|rep| match &rep[k] {
                Ok(r) => Ok(*r),
                Err(e) => Err(Error::Domain(e.to_string())),
            })
            .collect();
        let agg = aggregate(truth, &column);
        out.push(SimulationSummary {
            family: dgp.family,
            n: dgp.n,
            sigma_eps: dgp.sigma_eps,
            eta: hainmueller.then_some(dgp.eta),
            design: hainmueller.then_some(dgp.design),
            estimator: *kind,
            sigma: kind.uses_sigma().then_some(settings.sigma),
            replications: agg.replications,
            failures: agg.failures,
            truth,
            rmse: agg.rmse,
            bias: agg.bias,
            mean_half_width: agg.mean_half_width,
            coverage: agg.coverage,
        });
    }
    Ok(out)
}

pub const CSV_HEADER: [&str; 14] = [
    "family",
    "n",
    "sigma_eps",
    "eta",
    "design",
    "estimator",
    "sigma",
    "replications",
    "failures",
    "truth",
    "rmse",
    "bias",
    "mean_half_width",
    "coverage",
];

impl SimulationSummary {
    /// CSV fields in [`CSV_HEADER`] order, numbers in shortest round-trip form.
    pub fn csv_record(&self) -> Vec<String> {
        let num = crate::io::format_number;
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        vec![
            self.family.to_string(),
            self.n.to_string(),
            num(self.sigma_eps),
            opt(self.eta),
            self.design.map(|d| d.to_string()).unwrap_or_default(),
            self.estimator.label().to_string(),
            opt(self.sigma),
            self.replications.to_string(),
            self.failures.to_string(),
            num(self.truth),
            num(self.rmse),
            num(self.bias),
            num(self.mean_half_width),
            num(self.coverage),
        ]
    }

    fn row_label(&self) -> String {
        match self.sigma {
            Some(s) if s != 0.1 => format!("{} (σ={s})", self.estimator.label()),
            _ => self.estimator.label().to_string(),
        }
    }
}

fn table_number(v: f64) -> String {
    if !v.is_finite() {
        return "—".into();
    }
    let r = (v * 10.0).round() / 10.0;
    if r == r.trunc() {
        format!("{r:.0}")
    } else {
        format!("{r:.1}")
    }
}

fn table_fraction(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "—".into()
    }
}

/// Markdown tables laid out like published simulation tables: one block per
/// (family, σ_ε, η, design), columns for sample sizes, and for each
/// estimator a rmse/half-width row over a bias/coverage row.
pub fn render_markdown(rows: &[SimulationSummary]) -> String {
    let mut groups: Vec<(String, Vec<&SimulationSummary>)> = Vec::new();
    for row in rows {
        let mut title = format!("{}, σ_ε = {}", row.family, row.sigma_eps);
        if let (Some(eta), Some(design)) = (row.eta, row.design) {
            let _ = write!(title, ", η = {}, design {}", table_eta(eta), design);
        }
        match groups.iter_mut().find(|(t, _)| *t == title) {
            Some((_, members)) => members.push(row),
            None => groups.push((title, vec![row])),
        }
    }

    let mut out = String::new();
    for (title, members) in groups {
        let mut ns: Vec<usize> = members.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let mut labels: Vec<String> = Vec::new();
        for r in &members {
            let l = r.row_label();
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        let _ = writeln!(out, "### {title}\n");
        let _ = writeln!(out, "Left columns: rmse over bias. Right columns: half-width over coverage.\n");
        let head: Vec<String> = ns.iter().map(|n| format!("n={n}")).collect();
        let _ = writeln!(out, "| estimator | | {} | {} |", head.join(" | "), head.join(" | "));
        let _ = writeln!(out, "|---|---|{}{}", "---:|".repeat(ns.len()), "---:|".repeat(ns.len()));
        for label in labels {
            let find = |n: usize| members.iter().find(|r| r.n == n && r.row_label() == label);
            let cells = |f: &dyn Fn(&SimulationSummary) -> String| -> Vec<String> {
                ns.iter().map(|&n| find(n).map(|r| f(r)).unwrap_or_default()).collect()
            };
            let rmse = cells(&|r| table_number(r.rmse));
            let hw = cells(&|r| table_number(r.mean_half_width));
            let bias = cells(&|r| table_number(r.bias));
            let cov = cells(&|r| table_fraction(r.coverage));
            let _ = writeln!(out, "| {label} | rmse | {} | {} |", rmse.join(" | "), hw.join(" | "));
            let _ = writeln!(out, "| | bias | {} | {} |", bias.join(" | "), cov.join(" | "));
        }
        out.push('\n');
    }
    out
}

fn table_eta(eta: f64) -> String {
    let sq = eta * eta;
    if (sq - sq.round()).abs() < 1e-9 {
        format!("√{}", sq.round())
    } else {
        eta.to_string()
    }
}
