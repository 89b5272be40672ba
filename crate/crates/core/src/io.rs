//! CSV input and output.
//!
//! Numbers are written in shortest round-trip form, so reading an output
//! file back reproduces every value bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::data::{Dataset, TargetRule};
use crate::diagnostics::{ImbalanceTable, SpectrumReport};
use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::simbench::{SimulationSummary, CSV_HEADER};

/// Where target indicators come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetSource {
    Column(String),
    Rule(TargetRule),
}

/// Column roles in an input file. Every other column is a covariate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub w_col: String,
    pub y_col: String,
    pub target: TargetSource,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { w_col: "w".into(), y_col: "y".into(), target: TargetSource::Rule(TargetRule::All) }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan")
}

fn parse_bool(cell: &str, row: usize, col: &str) -> Result<bool> {
    match cell {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" => Ok(false),
        _ => Err(Error::Parse(format!("row {row}, column {col:?}: expected 0/1, got {cell:?}"))),
    }
}

/// Parses a dataset from CSV text with a header row. Row numbers in errors
/// count data rows from 0.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::schema(None, format!("column {name:?} not found in header")))
    };
    let w_idx = find(&schema.w_col)?;
    let y_idx = find(&schema.y_col)?;
    let t_idx = match &schema.target {
        TargetSource::Column(c) => Some(find(c)?),
        TargetSource::Rule(_) => None,
    };
    let cov: Vec<usize> = (0..header.len()).filter(|&j| j != w_idx && j != y_idx && Some(j) != t_idx).collect();
    if cov.is_empty() {
        return Err(Error::schema(None, "no covariate columns"));
    }

    let mut values = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    let mut t = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for &j in &cov {
            let cell = &rec[j];
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Parse(format!("row {row}, column {:?}: {cell:?} is not numeric", header[j])))?;
            values.push(v);
        }
        let wi: u32 = rec[w_idx]
            .parse()
            .map_err(|_| Error::Parse(format!("row {row}: treatment {:?} is not a nonnegative integer", &rec[w_idx])))?;
        w.push(wi);
        let ycell = &rec[y_idx];
        y.push(if is_missing(ycell) {
            None
        } else {
            Some(ycell.parse::<f64>().map_err(|_| Error::Parse(format!("row {row}: outcome {ycell:?} is not numeric")))?)
        });
        if let Some(ti) = t_idx {
            t.push(parse_bool(&rec[ti], row, &header[ti])?);
        }
    }
    let n = w.len();
    let x = DMatrix::from_row_slice(n, cov.len(), &values);
    let names = cov.iter().map(|&j| header[j].clone()).collect();
    let t = match &schema.target {
        TargetSource::Column(_) => t,
        TargetSource::Rule(rule) => rule.apply(&w),
    };
    Dataset::new(x, w, y, t, names)
}

/// Shortest decimal that parses back to the same double.
pub fn format_number(v: f64) -> String {
    if v.is_finite() && v != 0.0 && (v.abs() >= 1e16 || v.abs() < 1e-5) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn opt_number(v: Option<f64>) -> String {
    v.map(format_number).unwrap_or_default()
}

pub const REPORT_HEADER: [&str; 14] = [
    "estimator",
    "point",
    "variance",
    "half_width",
    "ci_low",
    "ci_high",
    "level",
    "scaled",
    "jitter",
    "max_weight",
    "weight_sum",
    "propensity_converged",
    "clipped",
    "sigma",
];

/// One CSV row per estimate. `sigma` is reported for estimators that use it.
pub fn write_reports<W: Write>(out: W, reports: &[EstimateReport], sigma: f64) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(REPORT_HEADER)?;
    for r in reports {
        wtr.write_record([
            r.estimator.to_string(),
            format_number(r.point),
            format_number(r.variance),
            format_number(r.half_width),
            format_number(r.ci_low),
            format_number(r.ci_high),
            format_number(r.level),
            r.scaled.to_string(),
            opt_number(r.meta.jitter),
            format_number(r.meta.max_weight),
            format_number(r.meta.weight_sum),
            r.meta.propensity_converged.map(|b| b.to_string()).unwrap_or_default(),
            r.meta.clipped.map(|c| c.to_string()).unwrap_or_default(),
            opt_number(r.estimator.uses_sigma().then_some(sigma)),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-unit weights: `row` is the 0-based input row of each `W = 0` unit.
pub fn write_weights<W: Write>(out: W, data: &Dataset, gamma: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["row", "weight"])?;
    for (&i, g) in data.treated_indices().iter().zip(gamma) {
        wtr.write_record([i.to_string(), format_number(*g)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a single-column weight file (an optional `row` column is ignored).
pub fn read_weights(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = header.iter().position(|h| h == "weight").unwrap_or(header.len() - 1);
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = &rec[col];
        out.push(cell.parse().map_err(|_| Error::Parse(format!("weights row {row}: {cell:?} is not numeric")))?);
    }
    Ok(out)
}

pub fn write_summaries<W: Write>(out: W, rows: &[SimulationSummary]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CSV_HEADER)?;
    for r in rows {
        wtr.write_record(r.csv_record())?;
    }
    wtr.flush()?;
    Ok(())
}

/// Long-format spectrum table: one row per eigenvalue and block.
pub fn write_spectra<W: Write>(out: W, spectra: &[(String, SpectrumReport)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["block", "index", "eigenvalue", "numeric_rank", "fitted_alpha", "fit_start", "fit_end"])?;
    for (name, s) in spectra {
        for (j, ev) in s.eigenvalues.iter().enumerate() {
            wtr.write_record([
                name.clone(),
                (j + 1).to_string(),
                format_number(*ev),
                s.numeric_rank.to_string(),
                opt_number(s.fitted_alpha),
                s.fit_range.map(|r| r.0.to_string()).unwrap_or_default(),
                s.fit_range.map(|r| r.1.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_imbalance<W: Write>(out: W, table: &ImbalanceTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["weights", "imbalance", "l2_norm", "objective", "flag"])?;
    for r in &table.rows {
        wtr.write_record([
            r.name.clone(),
            opt_number(r.imbalance),
            opt_number(r.l2_norm),
            opt_number(r.objective),
            r.flag.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(rule: &str) -> CsvSchema {
        CsvSchema { target: TargetSource::Rule(rule.parse().unwrap()), ..Default::default() }
    }

    #[test]
    fn rule_all_marks_every_row() {
        let text = "x1,w,y\n0.5,0,1.0\n1.5,1,\n2.5,0,3.0\n";
        let d = read_csv(text.as_bytes(), &schema("all")).unwrap();
        assert_eq!(d.targets(), &[true, true, true]);
        assert_eq!(d.outcomes()[1], None);
        assert_eq!(d.column_names(), &["x1".to_string()]);
    }

    #[test]
    fn missing_outcome_on_w0_names_the_row() {
        let text = "x1,w,y\n0.5,0,1.0\n1.5,0,\n";
        match read_csv(text.as_bytes(), &schema("all")) {
            Err(Error::Schema { row: Some(1), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_covariate_is_a_parse_error() {
        let text = "x1,w,y\nabc,0,1.0\n0.0,1,\n";
        assert!(matches!(read_csv(text.as_bytes(), &schema("all")), Err(Error::Parse(_))));
    }

    #[test]
    fn target_column_and_rule() {
        let text = "w,x1,y,t\n0,1,2,0\n1,2,,1\n0,3,4,1\n";
        let s = CsvSchema { target: TargetSource::Column("t".into()), ..Default::default() };
        let d = read_csv(text.as_bytes(), &s).unwrap();
        assert_eq!(d.targets(), &[false, true, true]);
        let d = read_csv(text.as_bytes(), &CsvSchema { target: TargetSource::Rule(TargetRule::TreatmentEquals(1)), ..s }).unwrap();
        assert_eq!(d.targets(), &[false, true, false]);
        assert_eq!(d.dim(), 2);
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-9, 6.02e23, 0.0, 210.0, f64::MIN_POSITIVE] {
            assert_eq!(format_number(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
