//! Observation tuples `(X, W, Y, T)` and the subgroup bookkeeping shared by
//! every estimator.
//!
//! Throughout the crate "treated" means the units that received the
//! treatment of interest, `W = 0`; those are the units whose outcomes are
//! observed and weighted. "Target" units are the ones with `T = 1`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// How target indicators are derived when they are not given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRule {
    /// Every unit is a target unit (missing-outcome problems).
    All,
    /// `T = 1{W = k}`; `k = 1` gives the effect-on-the-treated setting.
    TreatmentEquals(u32),
}

impl TargetRule {
    pub fn apply(&self, w: &[u32]) -> Vec<bool> {
        match *self {
            TargetRule::All => vec![true; w.len()],
            TargetRule::TreatmentEquals(k) => w.iter().map(|&wi| wi == k).collect(),
        }
    }
}

impl std::str::FromStr for TargetRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "all" {
            return Ok(TargetRule::All);
        }
        if let Some(rest) = s.strip_prefix("w=") {
            let k = rest
                .trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad target rule {s:?}")))?;
            return Ok(TargetRule::TreatmentEquals(k));
        }
        Err(Error::Config(format!("unknown target rule {s:?} (expected \"all\" or \"w=<k>\")")))
    }
}

impl std::fmt::Display for TargetRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetRule::All => write!(f, "all"),
            TargetRule::TreatmentEquals(k) => write!(f, "w={k}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    w: Vec<u32>,
    y: Vec<Option<f64>>,
    t: Vec<bool>,
    column_names: Vec<String>,
    treated: Vec<usize>,
    target: Vec<usize>,
}

impl Dataset {
    /// Validates and assembles a dataset. `x` is `n × d`, one row per unit.
    pub fn new(
        x: DMatrix<f64>,
        w: Vec<u32>,
        y: Vec<Option<f64>>,
        t: Vec<bool>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::schema(None, format!("need at least 2 units, got {n}")));
        }
        if w.len() != n || y.len() != n || t.len() != n {
            return Err(Error::schema(
                None,
                format!(
                    "length mismatch: X has {n} rows, W {}, Y {}, T {}",
                    w.len(),
                    y.len(),
                    t.len()
                ),
            ));
        }
        if column_names.len() != x.ncols() {
            return Err(Error::schema(
                None,
                format!("{} column names for {} covariates", column_names.len(), x.ncols()),
            ));
        }
        for i in 0..n {
            if x.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::schema(Some(i), "non-finite covariate"));
            }
            match y[i] {
                None if w[i] == 0 => {
                    return Err(Error::schema(Some(i), "missing outcome on a W=0 unit"))
                }
                Some(v) if !v.is_finite() => {
                    return Err(Error::schema(Some(i), "non-finite outcome"))
                }
                _ => {}
            }
        }
        let treated = (0..n).filter(|&i| w[i] == 0).collect();
        let target = (0..n).filter(|&i| t[i]).collect();
        Ok(Dataset { x, w, y, t, column_names, treated, target })
    }

    /// Builds a dataset whose target indicators follow `rule`.
    pub fn with_rule(
        x: DMatrix<f64>,
        w: Vec<u32>,
        y: Vec<Option<f64>>,
        rule: TargetRule,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let t = rule.apply(&w);
        Dataset::new(x, w, y, t, column_names)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn treatment(&self) -> &[u32] {
        &self.w
    }

    pub fn outcomes(&self) -> &[Option<f64>] {
        &self.y
    }

    pub fn targets(&self) -> &[bool] {
        &self.t
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Indices with `W = 0`, in row order.
    pub fn treated_indices(&self) -> &[usize] {
        &self.treated
    }

    /// Indices with `T = 1`, in row order.
    pub fn target_indices(&self) -> &[usize] {
        &self.target
    }

    /// n_Z.
    pub fn n_treated(&self) -> usize {
        self.treated.len()
    }

    /// n_T.
    pub fn n_target(&self) -> usize {
        self.target.len()
    }

    /// Outcomes of the `W = 0` units, aligned with `treated_indices`.
    pub fn treated_outcomes(&self) -> Vec<f64> {
        self.treated.iter().map(|&i| self.y[i].expect("validated")).collect()
    }

    /// Ȳ₀, the mean outcome over `W = 0` units.
    pub fn treated_mean(&self) -> Result<f64> {
        if self.treated.is_empty() {
            return Err(Error::Domain("no units with W=0".into()));
        }
        Ok(self.treated_outcomes().iter().sum::<f64>() / self.treated.len() as f64)
    }

    pub(crate) fn require_groups(&self) -> Result<()> {
        if self.treated.is_empty() {
            return Err(Error::Domain("no units with W=0".into()));
        }
        if self.target.is_empty() {
            return Err(Error::Domain("no target units (T=1)".into()));
        }
        Ok(())
    }

    /// Copy with every observed outcome passed through `f`.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Dataset {
        let mut out = self.clone();
        for v in out.y.iter_mut().flatten() {
            *v = f(*v);
        }
        out
    }

    /// Copy with the outcomes replaced; validation is rerun.
    pub fn with_outcomes(&self, y: Vec<Option<f64>>) -> Result<Dataset> {
        Dataset::new(self.x.clone(), self.w.clone(), y, self.t.clone(), self.column_names.clone())
    }

    /// Copy with a constant column appended (used to give linear kernels an intercept).
    pub fn with_constant_column(&self, value: f64, name: &str) -> Dataset {
        let n = self.n();
        let d = self.dim();
        let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { self.x[(i, j)] } else { value });
        let mut names = self.column_names.clone();
        names.push(name.to_string());
        Dataset { x, column_names: names, ..self.clone() }
    }
}

/// Default covariate names `x1..xd`.
pub fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (DMatrix<f64>, Vec<u32>) {
        (DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]), vec![0, 1, 0])
    }

    #[test]
    fn rule_all_marks_everyone() {
        let (x, w) = tiny();
        let d = Dataset::with_rule(
            x,
            w,
            vec![Some(1.0), None, Some(2.0)],
            TargetRule::All,
            default_names(1),
        )
        .unwrap();
        assert_eq!(d.targets(), &[true, true, true]);
        assert_eq!(d.treated_indices(), &[0, 2]);
        assert_eq!(d.n_target(), 3);
        assert_eq!(d.treated_mean().unwrap(), 1.5);
    }

    #[test]
    fn rule_w1_marks_treated_in_the_usual_sense() {
        let (x, w) = tiny();
        let d = Dataset::with_rule(
            x,
            w,
            vec![Some(1.0), Some(0.0), Some(2.0)],
            "w=1".parse().unwrap(),
            default_names(1),
        )
        .unwrap();
        assert_eq!(d.target_indices(), &[1]);
    }

    #[test]
    fn missing_outcome_on_w0_names_row() {
        let (x, w) = tiny();
        let err = Dataset::with_rule(x, w, vec![Some(1.0), None, None], TargetRule::All, default_names(1))
            .unwrap_err();
        assert!(matches!(err, Error::Schema { row: Some(2), .. }), "{err}");
    }

    #[test]
    fn rejects_nan_covariate_and_tiny_n() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, f64::NAN]);
        assert!(Dataset::with_rule(x, vec![0, 0], vec![Some(0.0); 2], TargetRule::All, default_names(1)).is_err());
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        assert!(Dataset::with_rule(x, vec![0], vec![Some(0.0)], TargetRule::All, default_names(1)).is_err());
    }

    #[test]
    fn target_rule_parsing() {
        assert_eq!("all".parse::<TargetRule>().unwrap(), TargetRule::All);
        assert_eq!("W=2".parse::<TargetRule>().unwrap(), TargetRule::TreatmentEquals(2));
        assert!("some".parse::<TargetRule>().is_err());
    }
}
