//! Plain-text `key = value` configuration for single runs and simulation
//! campaigns. Blank lines and `#` comments are ignored; lists are comma
//! separated. Numeric list entries may be written `sqrt(x)`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, ReportOptions};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::simbench::{run_replications, DgpSpec, Family, OutcomeDesign, SimSettings, SimulationSummary};

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = k.trim().to_ascii_lowercase();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
        }
    }
    Ok(out)
}

/// A number, or `sqrt(x)`.
pub fn parse_number(s: &str) -> Result<f64> {
    let s = s.trim();
    let lower = s.to_ascii_lowercase();
    let v = if let Some(inner) = lower.strip_prefix("sqrt(").and_then(|r| r.strip_suffix(')')) {
        inner.trim().parse::<f64>().map(f64::sqrt)
    } else {
        lower.parse::<f64>()
    };
    v.map_err(|_| Error::Config(format!("not a number: {s:?}")))
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(f).collect()
}

fn parse_bool(key: &str, s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true/false, got {other:?}"))),
    }
}

fn parse_int<T: std::str::FromStr>(key: &str, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {s:?}")))
}

pub fn parse_estimators(s: &str) -> Result<Vec<EstimatorKind>> {
    let list = parse_list(s, |p| p.parse())?;
    if list.is_empty() {
        return Err(Error::Config("empty estimator list".into()));
    }
    Ok(list)
}

fn estimator_list(list: &[EstimatorKind]) -> String {
    list.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
}

/// Applies the kernel keys present in `pairs` on top of `spec`.
fn kernel_from_pairs(pairs: &BTreeMap<String, String>, mut spec: KernelSpec) -> Result<KernelSpec> {
    if let Some(v) = pairs.get("kernel") {
        let family: KernelFamily = v.parse()?;
        spec = match family {
            KernelFamily::Linear => KernelSpec::linear(),
            _ => KernelSpec { family, ..spec },
        };
    }
    if let Some(v) = pairs.get("nu") {
        spec.nu = parse_number(v)?;
    }
    if let Some(v) = pairs.get("lengthscale") {
        spec.lengthscale = parse_number(v)?;
    }
    if let Some(v) = pairs.get("standardize") {
        spec.standardize = parse_bool("standardize", v)?;
    }
    spec.validate()?;
    Ok(spec)
}

fn kernel_lines(spec: &KernelSpec) -> String {
    format!(
        "kernel = {}\nnu = {}\nlengthscale = {}\nstandardize = {}\n",
        spec.family, spec.nu, spec.lengthscale, spec.standardize
    )
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Settings for `estimate`, `diagnose` and `weights` runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub estimators: Vec<EstimatorKind>,
    pub kernel: KernelSpec,
    pub sigma: f64,
    pub level: f64,
    pub scaled: bool,
    pub seed: u64,
    pub output_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            estimators: EstimatorKind::ROSTER.to_vec(),
            kernel: KernelSpec::default(),
            sigma: 0.1,
            level: 0.95,
            scaled: false,
            seed: 0,
            output_path: None,
        }
    }
}

const RUN_KEYS: [&str; 10] =
    ["estimators", "kernel", "nu", "lengthscale", "standardize", "sigma", "level", "scaled", "seed", "out"];

fn reject_unknown(pairs: &BTreeMap<String, String>, known: &[&str]) -> Result<()> {
    match pairs.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
        None => Ok(()),
    }
}

impl RunConfig {
    pub fn options(&self) -> ReportOptions {
        ReportOptions { level: self.level, scaled: self.scaled }
    }

    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        self.options().validate()?;
        self.kernel.validate()?;
        if self.estimators.is_empty() {
            return Err(Error::Config("empty estimator list".into()));
        }
        Ok(())
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        reject_unknown(&pairs, &RUN_KEYS)?;
        let mut cfg = RunConfig { kernel: kernel_from_pairs(&pairs, KernelSpec::default())?, ..Default::default() };
        if let Some(v) = pairs.get("estimators") {
            cfg.estimators = parse_estimators(v)?;
        }
        if let Some(v) = pairs.get("sigma") {
            cfg.sigma = parse_number(v)?;
        }
        if let Some(v) = pairs.get("level") {
            cfg.level = parse_number(v)?;
        }
        if let Some(v) = pairs.get("scaled") {
            cfg.scaled = parse_bool("scaled", v)?;
        }
        if let Some(v) = pairs.get("seed") {
            cfg.seed = parse_int("seed", v)?;
        }
        if let Some(v) = pairs.get("out") {
            cfg.output_path = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes every key, so reloading reproduces the configuration exactly.
    pub fn to_kv_string(&self) -> String {
        let mut s = format!("estimators = {}\n", estimator_list(&self.estimators));
        s.push_str(&kernel_lines(&self.kernel));
        s.push_str(&format!(
            "sigma = {}\nlevel = {}\nscaled = {}\nseed = {}\n",
            self.sigma, self.level, self.scaled, self.seed
        ));
        if let Some(p) = &self.output_path {
            s.push_str(&format!("out = {p}\n"));
        }
        s
    }
}

/// A grid of simulation cells sharing estimators and kernel settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub families: Vec<Family>,
    pub ns: Vec<usize>,
    pub sigma_eps: Vec<f64>,
    /// Hainmueller selection scales.
    pub etas: Vec<f64>,
    /// Hainmueller outcome designs.
    pub designs: Vec<OutcomeDesign>,
    /// Kernel penalties; one set of rows per value for σ-dependent estimators.
    pub sigmas: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub kernel: KernelSpec,
    pub level: f64,
}

const CAMPAIGN_KEYS: [&str; 14] = [
    "family",
    "n",
    "sigma_eps",
    "eta",
    "design",
    "sigma",
    "reps",
    "seed",
    "estimators",
    "kernel",
    "nu",
    "lengthscale",
    "standardize",
    "level",
];

/// One cell of a campaign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub dgp: DgpSpec,
    pub sigma: f64,
}

impl Campaign {
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        reject_unknown(&pairs, &CAMPAIGN_KEYS)?;
        let need = |k: &str| pairs.get(k).ok_or_else(|| Error::Config(format!("campaign is missing {k:?}")));
        let families = parse_list(need("family")?, |p| p.parse())?;
        let hainmueller = families.contains(&Family::Hainmueller);
        let c = Campaign {
            families,
            ns: parse_list(need("n")?, |p| parse_int("n", p))?,
            sigma_eps: parse_list(need("sigma_eps")?, parse_number)?,
            etas: match pairs.get("eta") {
                Some(v) => parse_list(v, parse_number)?,
                None if hainmueller => return Err(Error::Config("hainmueller campaigns need \"eta\"".into())),
                None => vec![],
            },
            designs: match pairs.get("design") {
                Some(v) => parse_list(v, |p| p.parse())?,
                None if hainmueller => return Err(Error::Config("hainmueller campaigns need \"design\"".into())),
                None => vec![],
            },
            sigmas: match pairs.get("sigma") {
                Some(v) => parse_list(v, parse_number)?,
                None => vec![0.1],
            },
            reps: parse_int("reps", need("reps")?)?,
            seed: match pairs.get("seed") {
                Some(v) => parse_int("seed", v)?,
                None => 0,
            },
            estimators: match pairs.get("estimators") {
                Some(v) => parse_estimators(v)?,
                None => EstimatorKind::ROSTER.to_vec(),
            },
            kernel: kernel_from_pairs(&pairs, KernelSpec::default())?,
            level: match pairs.get("level") {
                Some(v) => parse_number(v)?,
                None => 0.95,
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.ns.is_empty() || self.sigma_eps.is_empty() || self.sigmas.is_empty() {
            return Err(Error::Config("campaign lists must be nonempty".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        for &s in &self.sigmas {
            check_sigma(s)?;
        }
        ReportOptions { level: self.level, scaled: true }.validate()?;
        for cell in self.cells() {
            cell.dgp.validate()?;
        }
        Ok(())
    }

    /// Cells in file order: family, then σ_ε, η, design, σ, and n innermost.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &family in &self.families {
            let (etas, designs) = match family {
                Family::KangSchafer => (vec![1.0], vec![OutcomeDesign::D1]),
                Family::Hainmueller => (self.etas.clone(), self.designs.clone()),
            };
            for &sigma_eps in &self.sigma_eps {
                for &eta in &etas {
                    for &design in &designs {
                        for &sigma in &self.sigmas {
                            for &n in &self.ns {
                                let dgp = DgpSpec { family, n, sigma_eps, eta, design, seed: self.seed };
                                out.push(Cell { dgp, sigma });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Runs every cell. Estimators that ignore σ are run only for the first
    /// σ value. A failing cell is reported and the campaign continues.
    pub fn run(&self, threads: Option<usize>) -> (Vec<SimulationSummary>, Vec<(Cell, Error)>) {
        let mut rows = Vec::new();
        let mut failed = Vec::new();
        for cell in self.cells() {
            let first_sigma = cell.sigma == self.sigmas[0];
            let estimators: Vec<EstimatorKind> =
                self.estimators.iter().copied().filter(|k| first_sigma || k.uses_sigma()).collect();
            if estimators.is_empty() {
                continue;
            }
            let settings = SimSettings { kernel: self.kernel, sigma: cell.sigma, level: self.level, estimators, threads };
            match run_replications(&cell.dgp, &settings, self.reps, self.seed) {
                Ok(r) => rows.extend(r),
                Err(e) => failed.push((cell, e)),
            }
        }
        (rows, failed)
    }
}
