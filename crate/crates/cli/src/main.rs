use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kbal::config::{parse_estimators, Campaign, RunConfig};
use kbal::diagnostics::{compare_on_blocks, default_sets, spectrum, Block};
use kbal::estimators::{estimate, minimax_weights, EstimateReport};
use kbal::io::{load_csv, read_weights, write_imbalance, write_reports, write_spectra, write_summaries, write_weights, CsvSchema, TargetSource};
use kbal::kernels::gram_blocks;
use kbal::simbench::render_markdown;
use kbal::{Dataset, Error, KernelFamily, KernelSpec, Result, TargetRule};

/// Minimax linear estimation of means and treatment effects with kernel
/// balancing weights.
#[derive(Parser)]
#[command(name = "kbal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimates and confidence intervals for a dataset.
    Estimate(DataRun),
    /// Simulation campaign from a key = value file.
    Simulate(SimulateArgs),
    /// Gram spectra and worst-case imbalance of weight sets.
    Diagnose(DiagnoseArgs),
    /// Minimax weight for every W = 0 unit.
    Weights(DataRun),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Treatment column.
    #[arg(long, default_value = "w")]
    w_col: String,
    /// Outcome column; cells may be empty where W ≠ 0.
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Target indicator column (0/1). Overrides --t-rule.
    #[arg(long)]
    t_col: Option<String>,
    /// Target rule when no column is given: "all" or "w=<k>".
    #[arg(long, default_value = "all")]
    t_rule: String,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let target = match &self.t_col {
            Some(c) => TargetSource::Column(c.clone()),
            None => TargetSource::Rule(self.t_rule.parse::<TargetRule>()?),
        };
        let schema = CsvSchema { w_col: self.w_col.clone(), y_col: self.y_col.clone(), target };
        load_csv(&self.data, &schema)
    }
}

/// Settings shared by data-driven commands. Flags override `--config`.
#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Key = value file with defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// matern, gaussian or linear.
    #[arg(long)]
    kernel: Option<String>,
    /// Matérn smoothness: 0.5, 1.5 or 2.5.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    lengthscale: Option<f64>,
    /// Standardize covariates before evaluating the kernel.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    standardize: Option<bool>,
    /// Penalty σ; the weight problem uses σ².
    #[arg(long, allow_hyphen_values = true)]
    sigma: Option<f64>,
    /// Confidence level.
    #[arg(long)]
    level: Option<f64>,
    /// Report the mean over target units rather than the scaled sum.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    scaled: Option<bool>,
    /// Comma-separated list from ml, mlt, ols, ipw, aipw, att.
    #[arg(long)]
    estimators: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(k) = &self.kernel {
            let family: KernelFamily = k.parse()?;
            cfg.kernel = match family {
                KernelFamily::Linear => KernelSpec::linear(),
                _ => KernelSpec { family, ..cfg.kernel },
            };
        }
        if let Some(v) = self.nu {
            cfg.kernel.nu = v;
        }
        if let Some(v) = self.lengthscale {
            cfg.kernel.lengthscale = v;
        }
        if let Some(v) = self.standardize {
            cfg.kernel.standardize = v;
        }
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.level {
            cfg.level = v;
        }
        if let Some(v) = self.scaled {
            cfg.scaled = v;
        }
        if let Some(v) = &self.estimators {
            cfg.estimators = parse_estimators(v)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(p) = &self.out {
            cfg.output_path = Some(p.display().to_string());
        }
        if !(cfg.sigma > 0.0 && cfg.sigma.is_finite()) {
            return Err(Error::Config(format!("--sigma must be positive, got {}", cfg.sigma)));
        }
        if !(cfg.level > 0.0 && cfg.level < 1.0) {
            return Err(Error::Config(format!("--level must lie in (0, 1), got {}", cfg.level)));
        }
        cfg.kernel.validate().map_err(|e| Error::Config(format!("kernel flags: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct DataRun {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct SimulateArgs {
    /// Campaign file (family, n, sigma_eps, eta, design, reps, seed, ...).
    campaign: PathBuf,
    /// Override the campaign's replication count.
    #[arg(long)]
    reps: Option<usize>,
    /// Override the campaign's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the campaign's estimator list.
    #[arg(long)]
    estimators: Option<String>,
    /// Summary CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the markdown tables here (they always go to stdout).
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunFlags,
    /// Extra weight set as NAME=FILE; repeatable.
    #[arg(long = "weights", value_name = "NAME=FILE")]
    weight_files: Vec<String>,
    /// Spectrum CSV path.
    #[arg(long)]
    spectrum_out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn print_reports(reports: &[EstimateReport]) {
    println!("{:<6} {:>12} {:>12} {:>12} {:>12}", "est", "estimate", "std.err", "ci.low", "ci.high");
    for r in reports {
        let n_se = r.half_width / kbal::normal::two_sided_critical(r.level);
        println!(
            "{:<6} {:>12.2} {:>12.2} {:>12.2} {:>12.2}",
            r.estimator.label(),
            r.point,
            n_se,
            r.ci_low,
            r.ci_high
        );
    }
}

fn cmd_estimate(args: &DataRun) -> Result<()> {
    let cfg = args.run.resolve()?;
    let data = args.data.load()?;
    let reports = cfg
        .estimators
        .iter()
        .map(|&k| estimate(k, &data, &cfg.kernel, cfg.sigma, &cfg.options()))
        .collect::<Result<Vec<_>>>()?;
    match &cfg.output_path {
        Some(p) => {
            write_reports(output(Some(Path::new(p)))?, &reports, cfg.sigma)?;
            print_reports(&reports);
        }
        None => write_reports(output(None)?, &reports, cfg.sigma)?,
    }
    Ok(())
}

fn cmd_weights(args: &DataRun) -> Result<()> {
    let cfg = args.run.resolve()?;
    let data = args.data.load()?;
    let w = minimax_weights(&data, &cfg.kernel, cfg.sigma)?;
    write_weights(output(cfg.output_path.as_deref().map(Path::new))?, &data, &w.gamma)?;
    if w.jitter_added > 0.0 {
        eprintln!("note: added diagonal jitter {:e}", w.jitter_added);
    }
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let cfg = args.run.resolve()?;
    let data = args.data.load()?;
    let blocks = gram_blocks(&data, &cfg.kernel)?;
    let spectra = vec![
        ("treated".to_string(), spectrum(&blocks, Block::Treated)?),
        ("target".to_string(), spectrum(&blocks, Block::Target)?),
    ];
    let mut sets = default_sets(data.n_treated());
    for spec in &args.weight_files {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--weights expects NAME=FILE, got {spec:?}")))?;
        sets.push((name.to_string(), read_weights(path)?));
    }
    let table = compare_on_blocks(&blocks, data.n(), cfg.sigma * cfg.sigma, &sets)?;

    for (name, s) in &spectra {
        let alpha = s.fitted_alpha.map(|a| format!("{a:.2}")).unwrap_or_else(|| "n/a".into());
        println!("{name:<8} size {:>6}  numeric rank {:>6}  decay exponent {alpha}", s.eigenvalues.len(), s.numeric_rank);
    }
    println!();
    println!("{:<12} {:>14} {:>12} {:>14}", "weights", "imbalance", "l2 norm", "objective");
    for r in &table.rows {
        match (&r.flag, r.imbalance, r.l2_norm, r.objective) {
            (None, Some(i), Some(l), Some(o)) => println!("{:<12} {i:>14.6e} {l:>12.4} {o:>14.6e}", r.name),
            (flag, ..) => println!("{:<12} flagged: {}", r.name, flag.as_deref().unwrap_or("invalid")),
        }
    }
    if let Some(p) = &cfg.output_path {
        write_imbalance(output(Some(Path::new(p)))?, &table)?;
    }
    if let Some(p) = &args.spectrum_out {
        write_spectra(output(Some(p))?, &spectra)?;
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut campaign = Campaign::load(&args.campaign)?;
    if let Some(r) = args.reps {
        campaign.reps = r;
    }
    if let Some(s) = args.seed {
        campaign.seed = s;
    }
    if let Some(e) = &args.estimators {
        campaign.estimators = parse_estimators(e)?;
    }
    campaign.validate()?;
    let (rows, failed) = campaign.run(None);
    for (cell, err) in &failed {
        eprintln!("cell {} n={} failed: {err}", cell.dgp.family, cell.dgp.n);
    }
    if let Some(p) = &args.out {
        write_summaries(output(Some(p))?, &rows)?;
    }
    let md = render_markdown(&rows);
    if let Some(p) = &args.markdown {
        std::fs::write(p, &md)?;
    }
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Weights(a) => cmd_weights(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
