//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for configuration and usage errors, 2 for
//! numeric failures. Flags override values from `--config`, which override
//! built-in defaults.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experiments::{
    create, run_contraction, run_coverage, run_figures, run_fit, theory_table, verify_krr, verify_posterior,
    write_bands, write_json, write_metadata, write_rows, write_slopes, write_theory, ExperimentConfig, Overrides,
    DEFAULT_CONTRACTION_REPLICATES, DEFAULT_COVERAGE_REPLICATES, VERIFY_TOL,
};
use crate::inducing::StrategyKind;

pub const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (git ",
    env!("SVGP_GIT_HASH"),
    ", ",
    env!("SVGP_BUILD_PROFILE"),
    " build)"
);

#[derive(Debug, Parser)]
#[command(name = "svgp", version = LONG_VERSION, about = "Sparse variational GP regression and coverage experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one dataset and write the predictive band.
    Fit(RunArgs),
    /// Exact posterior and variational bands for every strategy and m.
    Figures(RunArgs),
    /// Replicated credible-ball coverage study.
    Coverage(RunArgs),
    /// Replicated contraction study with log-log slopes.
    Contraction(RunArgs),
    /// Deterministic bias, spread and variance terms.
    TheoryTerms(RunArgs),
    /// Check that fitted weights are stationary for the ridge objective.
    VerifyKrr(RunArgs),
    /// Compare the spectral and general posterior formulas.
    VerifyPosterior(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Replace the n-grid by a single n.
    #[arg(long)]
    pub n: Option<usize>,
    /// Replace the m-rule by a fixed m.
    #[arg(long)]
    pub m: Option<usize>,
    /// Base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restrict to one strategy.
    #[arg(long)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Worker threads (default: machine parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl RunArgs {
    fn config(&self, default_replicates: usize) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            n: self.n,
            m: self.m,
            seed: self.seed,
            strategy: self.strategy,
            replicates: self.replicates,
            threads: self.threads,
            output: self.output.clone(),
        })?;
        cfg.materialize(default_replicates);
        Ok(cfg)
    }
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = e.print();
                    1
                }
            }
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Fit(a) => fit(&a.config(1)?, out),
        Command::Figures(a) => figures(&a.config(1)?, out),
        Command::Coverage(a) => coverage(&a.config(DEFAULT_COVERAGE_REPLICATES)?, out),
        Command::Contraction(a) => contraction(&a.config(DEFAULT_CONTRACTION_REPLICATES)?, out),
        Command::TheoryTerms(a) => theory(&a.config(1)?, out),
        Command::VerifyKrr(a) => krr(&a.config(1)?, out),
        Command::VerifyPosterior(a) => posterior(&a.config(1)?, out),
    }
}

fn prepare(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    write_metadata(&dir, command, cfg, &cfg.warnings()?)?;
    Ok(dir)
}

fn coverage(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare(cfg, "coverage")?;
    let res = run_coverage(cfg)?;
    write_rows(&res.rows, create(&dir.join("coverage.csv"))?)?;
    write_json(&dir.join("inducing.json"), &res.inducing)?;
    writeln!(out, "n,m,strategy,coverage_m1,coverage_blowup,mean_mse,mean_rho")?;
    for s in res.summaries() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.n,
            s.m,
            s.strategy,
            fmt(s.covered_m1),
            fmt(s.covered_blowup),
            fmt(s.mse),
            fmt(s.rho)
        )?;
    }
    Ok(())
}

fn contraction(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare(cfg, "contraction")?;
    let res = run_contraction(cfg)?;
    write_rows(&res.study.rows, create(&dir.join("contraction.csv"))?)?;
    write_slopes(&res.slopes, create(&dir.join("contraction_slopes.csv"))?)?;
    write_json(&dir.join("inducing.json"), &res.study.inducing)?;
    write_slopes(&res.slopes, out)?;
    Ok(())
}

fn figures(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare(cfg, "figures")?;
    let res = run_figures(cfg)?;
    {
        let mut w = csv::Writer::from_writer(create(&dir.join("figures_truth.csv"))?);
        w.write_record(["x", "f0"])?;
        for (x, f) in res.grid.iter().zip(&res.truth) {
            w.write_record([x.to_string(), f.to_string()])?;
        }
        w.flush()?;
    }
    write_bands(&res.exact, create(&dir.join("figures_exact.csv"))?)?;
    let mut inducing = Vec::new();
    writeln!(out, "strategy,m,mean_half_width,truth_inside")?;
    let exact_hw = res.exact.iter().map(|b| b.upper - b.mean).sum::<f64>() / res.exact.len() as f64;
    writeln!(out, "exact,{},{},{}", res.n, exact_hw, res.truth_inside(&res.exact))?;
    for f in &res.fits {
        write_bands(&f.bands, create(&dir.join(format!("figures_{}_m{}.csv", f.strategy, f.m)))?)?;
        if let Some(p) = &f.points {
            inducing.push(serde_json::json!({"strategy": f.strategy, "m": f.m, "points": p}));
        }
        writeln!(out, "{},{},{},{}", f.strategy, f.m, f.mean_half_width(), res.truth_inside(&f.bands))?;
    }
    write_json(&dir.join("inducing.json"), &inducing)?;
    Ok(())
}

fn fit(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare(cfg, "fit")?;
    let res = run_fit(cfg)?;
    res.dataset.save_csv(&dir.join("fit_data.csv"))?;
    write_bands(&res.bands, create(&dir.join("fit_bands.csv"))?)?;
    write_json(&dir.join("fit_summary.json"), &res.summary)?;
    if let Some(p) = &res.inducing_points {
        write_json(&dir.join("inducing.json"), p)?;
    }
    writeln!(out, "{}", serde_json::to_string_pretty(&res.summary)?)?;
    Ok(())
}

fn theory(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare(cfg, "theory-terms")?;
    let rows = theory_table(cfg)?;
    write_theory(&rows, create(&dir.join("theory_terms.csv"))?)?;
    write_theory(&rows, out)?;
    Ok(())
}

fn krr(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare(cfg, "verify-krr")?;
    let checks = verify_krr(cfg)?;
    write_json(&dir.join("verify_krr.json"), &checks)?;
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.residual < VERIFY_TOL && c.local_minimum && c.hessian_min_eigenvalue > 0.0;
        writeln!(
            out,
            "{} n={} m={} residual={:.3e} hessian_min={:.3e} local_min={} {}",
            c.strategy,
            c.n,
            c.m,
            c.residual,
            c.hessian_min_eigenvalue,
            c.local_minimum,
            if ok { "PASS" } else { "FAIL" }
        )?;
        if !ok {
            failed.push(c.strategy.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::numeric("KRR stationarity check failed", failed.join(", ")))
    }
}

fn posterior(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare(cfg, "verify-posterior")?;
    let c = verify_posterior(cfg)?;
    write_json(&dir.join("verify_posterior.json"), &c)?;
    writeln!(
        out,
        "n={} m={} max_mean_discrepancy={:.3e} max_mean_rel={:.3e} max_var_rel={:.3e}",
        c.n, c.m, c.max_mean_abs, c.max_mean_rel, c.max_var_rel
    )?;
    if c.max_mean_abs < VERIFY_TOL && c.max_var_rel < VERIFY_TOL {
        Ok(())
    } else {
        Err(Error::numeric(
            "spectral and general posterior formulas disagree",
            format!("mean {:.3e}, variance {:.3e}", c.max_mean_abs, c.max_var_rel),
        ))
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

