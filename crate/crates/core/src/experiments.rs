//! Replicated Monte Carlo studies over `(n, m, strategy)` grids.
//!
//! Replicate `r` uses seed `base_seed + r` for its dataset; inducing-point
//! draws and radius quantiles use seeds derived from it. Work is spread over
//! a rayon pool and merged back in `(n, m, strategy, replicate)` order, so
//! outputs do not depend on scheduling.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::credible::{
    bands_from_prediction, l2_distance_to_truth, radius, BandPoint, DEFAULT_MC_SAMPLES, MIN_MC_SAMPLES,
};
use crate::error::{Error, Result};
use crate::inducing::{build_blocks, gram_eigen, StrategyKind};
use crate::krr_oracle::KrrProblem;
use crate::posterior::{fit_exact, fit_variational, midpoint_grid, DEFAULT_GRID};
use crate::spectral_kernel::{rescaling_tau, EigenSpectrum, SpectralKernel, TruncationPolicy};
use crate::synthetic_data::{sample_dataset, Dataset, TrueFunction, DEFAULT_TRUTH_TERMS, NORMAL_SAMPLER, PRNG_NAME};
use crate::theory::{effective_dim, predicted_rate, rate_terms, RateTerms};

pub const DEFAULT_COVERAGE_REPLICATES: usize = 200;
pub const DEFAULT_CONTRACTION_REPLICATES: usize = 50;
pub const DEFAULT_BASE_SEED: u64 = 1;
pub const DEFAULT_OUTPUT: &str = "svgp-output";

/// Tolerance used by the verification subcommands.
pub const VERIFY_TOL: f64 = 1e-8;

const DPP_SALT: u64 = 1;
const RADIUS_SALT: u64 = 2;

/// Seed for a secondary random stream of a replicate (splitmix64 finalizer).
pub fn derived_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Prior eigenvalue family; `exponential_rescaled` uses `τ = τ_n` at each `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumConfig {
    Polynomial {
        alpha: f64,
        #[serde(default = "one_u32")]
        d: u32,
        #[serde(default = "one_f64")]
        scale: f64,
    },
    ExponentialTheory {
        tau: f64,
        #[serde(default = "one_u32")]
        d: u32,
        #[serde(default = "one_f64")]
        scale: f64,
    },
    ExponentialExperiment {
        tau: f64,
    },
    ExponentialRescaled {
        alpha: f64,
    },
}

impl SpectrumConfig {
    pub fn spectrum_at(&self, n: usize) -> Result<EigenSpectrum> {
        let s = match *self {
            SpectrumConfig::Polynomial { alpha, d, scale } => EigenSpectrum::Polynomial { alpha, d, scale },
            SpectrumConfig::ExponentialTheory { tau, d, scale } => EigenSpectrum::ExponentialTheory { tau, d, scale },
            SpectrumConfig::ExponentialExperiment { tau } => EigenSpectrum::ExponentialExperiment { tau },
            SpectrumConfig::ExponentialRescaled { alpha } => {
                EigenSpectrum::ExponentialExperiment { tau: rescaling_tau(n as u64, alpha, 1)? }
            }
        };
        s.validate().map_err(|e| Error::config("spectrum", e.to_string()))?;
        Ok(s)
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            SpectrumConfig::Polynomial { alpha, .. } | SpectrumConfig::ExponentialRescaled { alpha } => Some(alpha),
            _ => None,
        }
    }

    pub fn d(&self) -> u32 {
        match *self {
            SpectrumConfig::Polynomial { d, .. } | SpectrumConfig::ExponentialTheory { d, .. } => d,
            _ => 1,
        }
    }
}

/// Truth presets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthConfig {
    /// `Σ_ℓ φ_{3ℓ} (3ℓ)^{-1/2-β} / log(3ℓ)`.
    LacunarySeries {
        beta: f64,
        #[serde(default = "default_terms")]
        terms: usize,
    },
    /// `f_{0,j} = j^{-exponent}`.
    PowerLaw {
        exponent: f64,
        #[serde(default = "default_terms")]
        terms: usize,
    },
    LowerBound {
        p: f64,
        r: f64,
        beta: f64,
        #[serde(default = "one_u32")]
        d: u32,
        #[serde(default = "default_terms")]
        terms: usize,
    },
    Oversmooth {
        q: f64,
        alpha: f64,
        beta: f64,
        #[serde(default = "one_u32")]
        d: u32,
        #[serde(default = "default_terms")]
        terms: usize,
    },
    Zero,
}

impl TruthConfig {
    pub fn build(&self) -> Result<TrueFunction> {
        match *self {
            TruthConfig::LacunarySeries { beta, terms } => TrueFunction::lacunary_series(beta, terms),
            TruthConfig::PowerLaw { exponent, terms } => TrueFunction::power_law(exponent, terms),
            TruthConfig::LowerBound { p, r, beta, d, terms } => TrueFunction::lower_bound(p, r, beta, d, terms),
            TruthConfig::Oversmooth { q, alpha, beta, d, terms } => TrueFunction::oversmooth(q, alpha, beta, d, terms),
            TruthConfig::Zero => Ok(TrueFunction::zero()),
        }
    }

    /// Nominal Sobolev smoothness, where defined.
    pub fn beta(&self) -> Option<f64> {
        match *self {
            TruthConfig::LacunarySeries { beta, .. }
            | TruthConfig::LowerBound { beta, .. }
            | TruthConfig::Oversmooth { beta, .. } => Some(beta),
            TruthConfig::PowerLaw { exponent, .. } => Some(exponent - 0.5),
            TruthConfig::Zero => None,
        }
    }
}

/// Number of inducing variables as a function of `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MRule {
    /// Every listed value at every `n`.
    Fixed { values: Vec<usize> },
    /// `⌈n^r⌉`.
    Power { r: f64 },
    /// `J_n`, the largest `j` with `n λ_j ≥ 1`.
    EffectiveDim,
    /// `⌈(τ^{-1} log n)^d⌉` for exponential spectra.
    TauThreshold,
}

impl MRule {
    pub fn values(&self, n: usize, spectrum: &EigenSpectrum) -> Result<Vec<usize>> {
        let nf = n as f64;
        let v = match self {
            MRule::Fixed { values } => values.clone(),
            MRule::Power { r } => vec![nf.powf(*r).ceil() as usize],
            MRule::EffectiveDim => vec![effective_dim(spectrum, n).max(1)],
            MRule::TauThreshold => {
                let (tau, d) = match *spectrum {
                    EigenSpectrum::ExponentialTheory { tau, d, .. } => (tau, d),
                    EigenSpectrum::ExponentialExperiment { tau } => (tau, 1),
                    EigenSpectrum::Polynomial { .. } => {
                        return Err(Error::config("m_rule.kind", "tau_threshold needs an exponential spectrum"))
                    }
                };
                vec![(nf.ln() / tau).powi(d as i32).ceil() as usize]
            }
        };
        if v.is_empty() || v.contains(&0) {
            return Err(Error::config("m_rule", "every m must be at least 1"));
        }
        Ok(v)
    }

    pub fn exponent(&self) -> Option<f64> {
        match self {
            MRule::Power { r } => Some(*r),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            MRule::Fixed { values } => format!(
                "fixed:{}",
                values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/")
            ),
            MRule::Power { r } => format!("power:{r}"),
            MRule::EffectiveDim => "effective_dim".into(),
            MRule::TauThreshold => "tau_threshold".into(),
        }
    }
}

/// Inflation of the credible radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlowupRule {
    Fixed { value: f64 },
    /// `M_n = scale · log n`.
    LogN { scale: f64 },
}

impl BlowupRule {
    pub fn at(&self, n: usize) -> f64 {
        match *self {
            BlowupRule::Fixed { value } => value,
            BlowupRule::LogN { scale } => scale * (n as f64).ln(),
        }
    }
}

impl Default for BlowupRule {
    fn default() -> Self {
        BlowupRule::Fixed { value: 2.0 }
    }
}

fn one_u32() -> u32 {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn default_terms() -> usize {
    DEFAULT_TRUTH_TERMS
}

fn default_strategies() -> Vec<StrategyKind> {
    StrategyKind::ALL.to_vec()
}

fn default_sigma() -> f64 {
    0.1
}

fn default_gamma() -> f64 {
    0.05
}

fn default_seed() -> u64 {
    DEFAULT_BASE_SEED
}

fn default_mc() -> usize {
    DEFAULT_MC_SAMPLES
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

/// A study description. Optional fields are materialized before a run so the
/// echoed config is complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub spectrum: SpectrumConfig,
    #[serde(default)]
    pub truncation: TruncationPolicy,
    pub truth: TruthConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    pub n_grid: Vec<usize>,
    pub m_rule: MRule,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub blowup: BlowupRule,
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub seed: Option<u64>,
    pub strategy: Option<StrategyKind>,
    pub replicates: Option<usize>,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
}

fn json_error_key(message: &str) -> String {
    let mut parts = message.split('`');
    match (parts.next(), parts.next()) {
        (Some(_), Some(key)) => key.to_string(),
        _ => "config".to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            Error::config(json_error_key(&msg), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::config("n_grid", "need at least one n, all >= 1"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "need at least one strategy"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", format!("must be positive, got {}", self.sigma)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", format!("must lie in (0,1), got {}", self.gamma)));
        }
        let blowup_ok = match self.blowup {
            BlowupRule::Fixed { value } => value > 0.0,
            BlowupRule::LogN { scale } => scale > 0.0,
        };
        if !blowup_ok {
            return Err(Error::config("blowup", "must be positive"));
        }
        if self.replicates == Some(0) {
            return Err(Error::config("replicates", "need at least one replicate"));
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            return Err(Error::config(
                "mc_samples",
                format!("need at least {MIN_MC_SAMPLES}, got {}", self.mc_samples),
            ));
        }
        if self.grid_points < 2 {
            return Err(Error::config("grid_points", "need at least 2 points"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "need at least one thread"));
        }
        if !(self.truncation.tail_tol > 0.0) || self.truncation.max_terms == 0 {
            return Err(Error::config("truncation", "tail_tol and max_terms must be positive"));
        }
        if let MRule::Power { r } = self.m_rule {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config("m_rule.r", format!("must lie in (0,1], got {r}")));
            }
        }
        for &n in &self.n_grid {
            self.spectrum.spectrum_at(n)?;
        }
        self.truth.build().map_err(|e| match e {
            Error::Config { key, message } if !key.starts_with("truth") => {
                Error::config(format!("truth.{key}"), message)
            }
            other => other,
        })?;
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(n) = o.n {
            self.n_grid = vec![n];
        }
        if let Some(m) = o.m {
            self.m_rule = MRule::Fixed { values: vec![m] };
        }
        if let Some(s) = o.seed {
            self.base_seed = s;
        }
        if let Some(k) = o.strategy {
            self.strategies = vec![k];
        }
        if o.replicates.is_some() {
            self.replicates = o.replicates;
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
        if o.output.is_some() {
            self.output = o.output.clone();
        }
        self.validate()
    }

    /// Fills in every optional field, using `default_replicates` for `replicates`.
    pub fn materialize(&mut self, default_replicates: usize) {
        self.replicates.get_or_insert(default_replicates);
        self.threads.get_or_insert_with(rayon::current_num_threads);
        self.output.get_or_insert_with(|| PathBuf::from(DEFAULT_OUTPUT));
    }

    pub fn replicate_count(&self, default_replicates: usize) -> usize {
        self.replicates.unwrap_or(default_replicates)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    pub fn kernel_at(&self, n: usize) -> Result<SpectralKernel> {
        SpectralKernel::new(self.spectrum.spectrum_at(n)?, self.truncation)
    }

    pub fn m_values(&self, n: usize) -> Result<Vec<usize>> {
        self.m_rule.values(n, &self.spectrum.spectrum_at(n)?)
    }

    /// Messages for grid cells violating `m² log n / n < 1`.
    pub fn warnings(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &n in &self.n_grid {
            for m in self.m_values(n)? {
                let v = (m * m) as f64 * (n as f64).ln() / n as f64;
                if v >= 1.0 {
                    out.push(format!("n={n} m={m}: m^2 log(n)/n = {v:.3} >= 1"));
                }
            }
        }
        Ok(out)
    }

    /// Runs `f` inside a pool with the configured worker count.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.threads {
            Some(t) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(|e| Error::config("threads", e.to_string()))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Replicate,
    Summary,
    Error,
}

impl RowKind {
    pub fn label(self) -> &'static str {
        match self {
            RowKind::Replicate => "replicate",
            RowKind::Summary => "summary",
            RowKind::Error => "error",
        }
    }
}

/// One line of a coverage or contraction table. Summary rows hold means, and
/// coverage proportions in the `covered_*` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub kind: RowKind,
    pub n: usize,
    pub m: usize,
    pub strategy: StrategyKind,
    pub replicate: Option<usize>,
    pub seed: u64,
    pub mse: Option<f64>,
    pub rho: Option<f64>,
    pub covered_m1: Option<f64>,
    pub covered_blowup: Option<f64>,
    pub spread: Option<f64>,
    pub b_n: Option<f64>,
    pub w_n: Option<f64>,
    pub v_n: Option<f64>,
    pub r_n: Option<f64>,
    pub elbo: Option<f64>,
    pub wall_time_ms: f64,
    pub error: String,
}

pub const RESULT_COLUMNS: [&str; 18] = [
    "kind",
    "n",
    "m",
    "strategy",
    "replicate",
    "seed",
    "mse",
    "rho",
    "covered_m1",
    "covered_blowup",
    "spread",
    "b_n",
    "w_n",
    "v_n",
    "r_n",
    "elbo",
    "wall_time_ms",
    "error",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultRow {
    fn empty(kind: RowKind, n: usize, m: usize, strategy: StrategyKind, replicate: Option<usize>, seed: u64) -> Self {
        ResultRow {
            kind,
            n,
            m,
            strategy,
            replicate,
            seed,
            mse: None,
            rho: None,
            covered_m1: None,
            covered_blowup: None,
            spread: None,
            b_n: None,
            w_n: None,
            v_n: None,
            r_n: None,
            elbo: None,
            wall_time_ms: 0.0,
            error: String::new(),
        }
    }

    pub fn record(&self) -> Vec<String> {
        vec![
            self.kind.label().to_string(),
            self.n.to_string(),
            self.m.to_string(),
            self.strategy.name().to_string(),
            self.replicate.map(|r| r.to_string()).unwrap_or_default(),
            self.seed.to_string(),
            opt(self.mse),
            opt(self.rho),
            opt(self.covered_m1),
            opt(self.covered_blowup),
            opt(self.spread),
            opt(self.b_n),
            opt(self.w_n),
            opt(self.v_n),
            opt(self.r_n),
            opt(self.elbo),
            format!("{:.3}", self.wall_time_ms),
            self.error.clone(),
        ]
    }
}

pub fn write_rows<W: Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Inducing inputs used by one fit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InducingRecord {
    pub n: usize,
    pub m: usize,
    pub strategy: StrategyKind,
    pub replicate: usize,
    pub seed: u64,
    pub points: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Study {
    Coverage,
    Contraction,
}

#[derive(Clone, Debug)]
struct Cell {
    n: usize,
    m: usize,
    strategy: StrategyKind,
    terms: std::result::Result<RateTerms, String>,
}

struct Context {
    kernels: Vec<(usize, Arc<SpectralKernel>)>,
    cells: Vec<Cell>,
    truth: Arc<TrueFunction>,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let truth = Arc::new(cfg.truth.build()?);
        let mut kernels = Vec::new();
        let mut cells = Vec::new();
        for &n in &cfg.n_grid {
            let kernel = Arc::new(cfg.kernel_at(n)?);
            for m in cfg.m_values(n)? {
                let terms = rate_terms(&kernel, &truth, n, m, cfg.sigma * cfg.sigma).map_err(|e| e.to_string());
                for &strategy in &cfg.strategies {
                    cells.push(Cell {
                        n,
                        m,
                        strategy,
                        terms: terms.clone(),
                    });
                }
            }
            kernels.push((n, kernel));
        }
        Ok(Context { kernels, cells, truth })
    }

    fn kernel(&self, n: usize) -> &Arc<SpectralKernel> {
        &self.kernels.iter().find(|(k, _)| *k == n).expect("kernel for every n").1
    }
}

struct ReplicateOutput {
    row: ResultRow,
    inducing: Option<InducingRecord>,
}

fn fit_cell(
    cfg: &ExperimentConfig,
    study: Study,
    ctx: &Context,
    cell: &Cell,
    data: &Dataset,
    eigen: Option<&crate::linalg::SymmetricEigen>,
    replicate: usize,
    seed: u64,
) -> Result<ReplicateOutput> {
    let start = Instant::now();
    let kernel = ctx.kernel(cell.n);
    let blocks = build_blocks(cell.strategy, kernel, data, cell.m, eigen, derived_seed(seed, DPP_SALT))?;
    let inducing = blocks.points().map(|p| InducingRecord {
        n: cell.n,
        m: cell.m,
        strategy: cell.strategy,
        replicate,
        seed,
        points: p.to_vec(),
        indices: blocks.selected_indices().map(|i| i.to_vec()),
    });
    let post = fit_variational(kernel, data, blocks)?;
    let distance = l2_distance_to_truth(&post, &ctx.truth)?;
    let mut row = ResultRow::empty(RowKind::Replicate, cell.n, cell.m, cell.strategy, Some(replicate), seed);
    row.mse = Some(distance * distance);
    if study == Study::Coverage {
        let ball = radius(&post, cfg.gamma, cfg.mc_samples, derived_seed(seed, RADIUS_SALT))?;
        row.rho = Some(ball.radius);
        row.covered_m1 = Some((distance <= ball.radius) as u8 as f64);
        row.covered_blowup = Some((distance <= cfg.blowup.at(cell.n) * ball.radius) as u8 as f64);
    }
    row.spread = Some(post.posterior_l2_spread()?);
    if let Ok(t) = &cell.terms {
        row.b_n = Some(t.b_n);
        row.w_n = Some(t.w_n);
        row.v_n = Some(t.v_n);
        row.r_n = Some(t.r_n);
    }
    row.elbo = Some(post.elbo()?);
    row.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(ReplicateOutput { row, inducing })
}

fn run_replicate(
    cfg: &ExperimentConfig,
    study: Study,
    ctx: &Context,
    n: usize,
    replicate: usize,
) -> Vec<(usize, ReplicateOutput)> {
    let seed = cfg.base_seed.wrapping_add(replicate as u64);
    let cells: Vec<(usize, &Cell)> = ctx.cells.iter().enumerate().filter(|(_, c)| c.n == n).collect();
    let error_rows = |msg: String| -> Vec<(usize, ReplicateOutput)> {
        cells
            .iter()
            .map(|&(i, c)| {
                let mut row = ResultRow::empty(RowKind::Error, c.n, c.m, c.strategy, Some(replicate), seed);
                row.error = msg.clone();
                (i, ReplicateOutput { row, inducing: None })
            })
            .collect()
    };
    let data = match sample_dataset(&ctx.truth, n, cfg.sigma, seed) {
        Ok(d) => d,
        Err(e) => return error_rows(e.to_string()),
    };
    let eigen = if cells.iter().any(|(_, c)| c.strategy.needs_gram_eigen()) {
        match gram_eigen(ctx.kernel(n), &data) {
            Ok(e) => Some(e),
            Err(e) => return error_rows(e.to_string()),
        }
    } else {
        None
    };
    cells
        .iter()
        .map(|&(i, c)| {
            let out = fit_cell(cfg, study, ctx, c, &data, eigen.as_ref(), replicate, seed).unwrap_or_else(|e| {
                let mut row = ResultRow::empty(RowKind::Error, c.n, c.m, c.strategy, Some(replicate), seed);
                row.error = e.to_string();
                ReplicateOutput { row, inducing: None }
            });
            (i, out)
        })
        .collect()
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut k) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        k += 1;
    }
    (k > 0).then(|| s / k as f64)
}

fn summary_row(cfg: &ExperimentConfig, cell: &Cell, rows: &[ResultRow]) -> ResultRow {
    let ok: Vec<&ResultRow> = rows.iter().filter(|r| r.kind == RowKind::Replicate).collect();
    let mut s = ResultRow::empty(RowKind::Summary, cell.n, cell.m, cell.strategy, None, cfg.base_seed);
    s.mse = mean(ok.iter().map(|r| r.mse));
    s.rho = mean(ok.iter().map(|r| r.rho));
    s.covered_m1 = mean(ok.iter().map(|r| r.covered_m1));
    s.covered_blowup = mean(ok.iter().map(|r| r.covered_blowup));
    s.spread = mean(ok.iter().map(|r| r.spread));
    match &cell.terms {
        Ok(t) => {
            s.b_n = Some(t.b_n);
            s.w_n = Some(t.w_n);
            s.v_n = Some(t.v_n);
            s.r_n = Some(t.r_n);
        }
        Err(e) => s.error = format!("rate terms: {e}"),
    }
    s.elbo = mean(ok.iter().map(|r| r.elbo));
    s.wall_time_ms = rows.iter().map(|r| r.wall_time_ms).sum();
    let failed = rows.len() - ok.len();
    if failed > 0 {
        if !s.error.is_empty() {
            s.error.push_str("; ");
        }
        s.error.push_str(&format!("{failed} of {} replicates failed", rows.len()));
    }
    s
}

/// Rows and inducing selections of a replicated study.
#[derive(Clone, Debug)]
pub struct StudyOutput {
    /// Replicate and error rows in `(n, m, strategy, replicate)` order,
    /// followed by one summary row per cell.
    pub rows: Vec<ResultRow>,
    pub inducing: Vec<InducingRecord>,
    pub warnings: Vec<String>,
}

impl StudyOutput {
    pub fn replicate_rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.kind != RowKind::Summary)
    }

    pub fn summaries(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Summary)
    }

    pub fn summary(&self, n: usize, strategy: StrategyKind) -> Option<&ResultRow> {
        self.summaries().find(|r| r.n == n && r.strategy == strategy)
    }
}

fn run_study(cfg: &ExperimentConfig, study: Study, default_reps: usize) -> Result<StudyOutput> {
    cfg.validate()?;
    let warnings = cfg.warnings()?;
    for w in &warnings {
        warn!("{w}");
    }
    let ctx = Context::new(cfg)?;
    let reps = cfg.replicate_count(default_reps);
    let tasks: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..reps).map(move |r| (n, r)))
        .collect();
    let results: Vec<Vec<(usize, ReplicateOutput)>> = cfg.install(|| {
        tasks
            .par_iter()
            .map(|&(n, r)| run_replicate(cfg, study, &ctx, n, r))
            .collect()
    })?;
    let mut per_cell: Vec<Vec<ReplicateOutput>> = (0..ctx.cells.len()).map(|_| Vec::new()).collect();
    for (i, out) in results.into_iter().flatten() {
        per_cell[i].push(out);
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut inducing = Vec::new();
    for (cell, outs) in ctx.cells.iter().zip(per_cell) {
        let mut cell_rows: Vec<ResultRow> = Vec::with_capacity(outs.len());
        for o in outs {
            cell_rows.push(o.row);
            inducing.extend(o.inducing);
        }
        cell_rows.sort_by_key(|r| r.replicate);
        summaries.push(summary_row(cfg, cell, &cell_rows));
        rows.extend(cell_rows);
    }
    inducing.sort_by(|a, b| {
        (a.n, a.m, a.strategy.name(), a.replicate).cmp(&(b.n, b.m, b.strategy.name(), b.replicate))
    });
    rows.extend(summaries);
    Ok(StudyOutput { rows, inducing, warnings })
}

/// Coverage study: distances, radii and coverage indicators per replicate.
pub fn run_coverage(cfg: &ExperimentConfig) -> Result<StudyOutput> {
    run_study(cfg, Study::Coverage, DEFAULT_COVERAGE_REPLICATES)
}

/// Least-squares fit of `log mse` against `log n` for one `(m-rule slot, strategy)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub strategy: StrategyKind,
    pub m_rule: String,
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

#[derive(Clone, Debug)]
pub struct ContractionOutput {
    pub study: StudyOutput,
    pub slopes: Vec<SlopeFit>,
}

pub fn log_log_slope(ns: &[f64], values: &[f64]) -> (f64, f64) {
    let k = ns.len() as f64;
    let lx: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Contraction study: mean squared `L²` error per cell and its log-log slope in `n`.
pub fn run_contraction(cfg: &ExperimentConfig) -> Result<ContractionOutput> {
    let mut distinct = cfg.n_grid.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::config("n_grid", "contraction needs at least 4 distinct n values"));
    }
    let study = run_study(cfg, Study::Contraction, DEFAULT_CONTRACTION_REPLICATES)?;
    let slots = match &cfg.m_rule {
        MRule::Fixed { values } => values.len(),
        _ => 1,
    };
    let mut slopes = Vec::new();
    for slot in 0..slots {
        for &strategy in &cfg.strategies {
            let mut ns = Vec::new();
            let mut mses = Vec::new();
            for &n in &cfg.n_grid {
                let m = cfg.m_values(n)?[slot];
                if let Some(v) = study
                    .summaries()
                    .find(|r| r.n == n && r.m == m && r.strategy == strategy)
                    .and_then(|r| r.mse)
                {
                    ns.push(n as f64);
                    mses.push(v);
                }
            }
            let label = match &cfg.m_rule {
                MRule::Fixed { values } => format!("fixed:{}", values[slot]),
                other => other.label(),
            };
            let (slope, intercept) = if ns.len() >= 2 {
                log_log_slope(&ns, &mses)
            } else {
                (f64::NAN, f64::NAN)
            };
            slopes.push(SlopeFit {
                strategy,
                m_rule: label,
                slope,
                intercept,
                points: ns.len(),
            });
        }
    }
    Ok(ContractionOutput { study, slopes })
}

pub fn write_slopes<W: Write>(slopes: &[SlopeFit], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["strategy", "m_rule", "slope", "intercept", "points"])?;
    for s in slopes {
        w.write_record([
            s.strategy.name().to_string(),
            s.m_rule.clone(),
            s.slope.to_string(),
            s.intercept.to_string(),
            s.points.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Bands of one variational fit on the figure grid.
#[derive(Clone, Debug)]
pub struct FigureFit {
    pub strategy: StrategyKind,
    pub m: usize,
    pub bands: Vec<BandPoint>,
    pub points: Option<Vec<f64>>,
}

impl FigureFit {
    pub fn mean_half_width(&self) -> f64 {
        self.bands.iter().map(|b| b.upper - b.mean).sum::<f64>() / self.bands.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct FiguresOutput {
    pub n: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub exact: Vec<BandPoint>,
    pub fits: Vec<FigureFit>,
    pub warnings: Vec<String>,
}

impl FiguresOutput {
    pub fn fit(&self, strategy: StrategyKind, m: usize) -> Option<&FigureFit> {
        self.fits.iter().find(|f| f.strategy == strategy && f.m == m)
    }

    /// Fraction of grid points where the truth lies inside `bands`.
    pub fn truth_inside(&self, bands: &[BandPoint]) -> f64 {
        let inside = bands
            .iter()
            .zip(&self.truth)
            .filter(|(b, &f)| b.lower <= f && f <= b.upper)
            .count();
        inside as f64 / bands.len() as f64
    }
}

/// Exact posterior and one variational fit per `(strategy, m)` on a single dataset.
pub fn run_figures(cfg: &ExperimentConfig) -> Result<FiguresOutput> {
    cfg.validate()?;
    if cfg.n_grid.len() != 1 {
        return Err(Error::config("n_grid", "figures need exactly one n"));
    }
    let n = cfg.n_grid[0];
    let warnings = cfg.warnings()?;
    for w in &warnings {
        warn!("{w}");
    }
    let kernel = cfg.kernel_at(n)?;
    let truth = Arc::new(cfg.truth.build()?);
    let seed = cfg.base_seed;
    let data = sample_dataset(&truth, n, cfg.sigma, seed)?;
    let grid = midpoint_grid(cfg.grid_points);
    let needs_eigen = cfg.strategies.iter().any(|s| s.needs_gram_eigen());
    let jobs: Vec<(StrategyKind, usize)> = cfg
        .m_values(n)?
        .into_iter()
        .flat_map(|m| cfg.strategies.iter().map(move |&s| (s, m)))
        .collect();
    let (exact, eigen, fits) = cfg.install(|| -> Result<_> {
        let (exact, eigen) = rayon::join(
            || -> Result<Vec<BandPoint>> {
                let post = fit_exact(&kernel, &data)?;
                bands_from_prediction(&grid, &post.predict_many(&grid)?, cfg.gamma)
            },
            || needs_eigen.then(|| gram_eigen(&kernel, &data)).transpose(),
        );
        let (exact, eigen) = (exact?, eigen?);
        let fits: Result<Vec<FigureFit>> = jobs
            .par_iter()
            .map(|&(strategy, m)| {
                let blocks = build_blocks(strategy, &kernel, &data, m, eigen.as_ref(), derived_seed(seed, DPP_SALT))?;
                let points = blocks.points().map(|p| p.to_vec());
                let post = fit_variational(&kernel, &data, blocks)?;
                Ok(FigureFit {
                    strategy,
                    m,
                    bands: bands_from_prediction(&grid, &post.predict_many(&grid)?, cfg.gamma)?,
                    points,
                })
            })
            .collect();
        Ok((exact, eigen, fits?))
    })??;
    drop(eigen);
    Ok(FiguresOutput {
        n,
        seed,
        truth: truth.eval_many(&grid)?,
        grid,
        exact,
        fits,
        warnings,
    })
}

pub fn write_bands<W: Write>(bands: &[BandPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "mean", "sd", "lower", "upper"])?;
    for b in bands {
        w.write_record([
            b.x.to_string(),
            b.mean.to_string(),
            b.sd.to_string(),
            b.lower.to_string(),
            b.upper.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the `theory-terms` table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryRow {
    pub n: usize,
    pub m: usize,
    pub j_n: usize,
    pub b_n: f64,
    pub w_n: f64,
    pub v_n: f64,
    pub r_n: f64,
    pub m2_log_n_over_n: f64,
    pub predicted_exponent: Option<f64>,
    pub regime: Option<String>,
}

/// Deterministic rate terms for every `(n, m)` of the grid.
pub fn theory_table(cfg: &ExperimentConfig) -> Result<Vec<TheoryRow>> {
    cfg.validate()?;
    let truth = cfg.truth.build()?;
    let predicted = match (cfg.spectrum.alpha(), cfg.truth.beta()) {
        (Some(a), Some(b)) if b > 0.0 => Some(predicted_rate(a, b, cfg.spectrum.d(), cfg.m_rule.exponent())?),
        _ => None,
    };
    let mut rows = Vec::new();
    for &n in &cfg.n_grid {
        let kernel = cfg.kernel_at(n)?;
        for m in cfg.m_values(n)? {
            let t = rate_terms(&kernel, &truth, n, m, cfg.sigma * cfg.sigma)?;
            rows.push(TheoryRow {
                n,
                m,
                j_n: t.j_n,
                b_n: t.b_n,
                w_n: t.w_n,
                v_n: t.v_n,
                r_n: t.r_n,
                m2_log_n_over_n: (m * m) as f64 * (n as f64).ln() / n as f64,
                predicted_exponent: predicted.map(|p| p.exponent),
                regime: predicted.map(|p| p.regime.label().to_string()),
            });
        }
    }
    Ok(rows)
}

pub fn write_theory<W: Write>(rows: &[TheoryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "n",
        "m",
        "j_n",
        "b_n",
        "w_n",
        "v_n",
        "r_n",
        "m2_log_n_over_n",
        "predicted_exponent",
        "regime",
    ])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.m.to_string(),
            r.j_n.to_string(),
            r.b_n.to_string(),
            r.w_n.to_string(),
            r.v_n.to_string(),
            r.r_n.to_string(),
            r.m2_log_n_over_n.to_string(),
            opt(r.predicted_exponent),
            r.regime.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Single fit on replicate 0 at the first `(n, m, strategy)` of the grid.
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub dataset: Dataset,
    pub strategy: StrategyKind,
    pub m: usize,
    pub bands: Vec<BandPoint>,
    pub summary: FitSummary,
    pub inducing_points: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitSummary {
    pub n: usize,
    pub m: usize,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub mse: f64,
    pub rho: f64,
    pub spread: f64,
    pub elbo: f64,
    pub jitter_kuu: f64,
    pub jitter_b: f64,
}

pub fn run_fit(cfg: &ExperimentConfig) -> Result<FitOutput> {
    cfg.validate()?;
    let n = cfg.n_grid[0];
    let m = cfg.m_values(n)?[0];
    let strategy = cfg.strategies[0];
    let kernel = cfg.kernel_at(n)?;
    let truth = Arc::new(cfg.truth.build()?);
    let seed = cfg.base_seed;
    let data = sample_dataset(&truth, n, cfg.sigma, seed)?;
    let blocks = build_blocks(strategy, &kernel, &data, m, None, derived_seed(seed, DPP_SALT))?;
    let inducing_points = blocks.points().map(|p| p.to_vec());
    let post = fit_variational(&kernel, &data, blocks)?;
    let grid = midpoint_grid(cfg.grid_points);
    let bands = bands_from_prediction(&grid, &post.predict_many(&grid)?, cfg.gamma)?;
    let distance = l2_distance_to_truth(&post, &truth)?;
    let ball = radius(&post, cfg.gamma, cfg.mc_samples, derived_seed(seed, RADIUS_SALT))?;
    let (jitter_kuu, jitter_b) = post.jitter();
    let summary = FitSummary {
        n,
        m,
        strategy,
        seed,
        mse: distance * distance,
        rho: ball.radius,
        spread: post.posterior_l2_spread()?,
        elbo: post.elbo()?,
        jitter_kuu,
        jitter_b,
    };
    Ok(FitOutput {
        dataset: data,
        strategy,
        m,
        bands,
        summary,
        inducing_points,
    })
}

/// Largest spectral-vs-general discrepancies over the design points and the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PosteriorCheck {
    pub n: usize,
    pub m: usize,
    pub max_mean_abs: f64,
    pub max_mean_rel: f64,
    pub max_var_rel: f64,
}

pub fn verify_posterior(cfg: &ExperimentConfig) -> Result<PosteriorCheck> {
    cfg.validate()?;
    let n = cfg.n_grid[0];
    let m = cfg.m_values(n)?[0];
    let kernel = cfg.kernel_at(n)?;
    let truth = Arc::new(cfg.truth.build()?);
    let data = sample_dataset(&truth, n, cfg.sigma, cfg.base_seed)?;
    let blocks = build_blocks(StrategyKind::PopulationSpectral, &kernel, &data, m, None, 0)?;
    let post = fit_variational(&kernel, &data, blocks)?;
    let mut xs = data.x.clone();
    xs.extend(midpoint_grid(cfg.grid_points));
    let a = post.predict_spectral_many(&xs)?;
    let b = post.predict_general_many(&xs)?;
    let scale = a.mean.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut check = PosteriorCheck {
        n,
        m,
        max_mean_abs: 0.0,
        max_mean_rel: 0.0,
        max_var_rel: 0.0,
    };
    for i in 0..xs.len() {
        let dm = (a.mean[i] - b.mean[i]).abs();
        check.max_mean_abs = check.max_mean_abs.max(dm);
        check.max_mean_rel = check.max_mean_rel.max(dm / scale);
        let dv = (a.variance[i] - b.variance[i]).abs() / a.variance[i].abs().max(f64::MIN_POSITIVE);
        check.max_var_rel = check.max_var_rel.max(dv);
    }
    Ok(check)
}

/// Stationarity of the fitted weights for the KRR objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KrrCheck {
    pub strategy: StrategyKind,
    pub n: usize,
    pub m: usize,
    pub residual: f64,
    pub hessian_min_eigenvalue: f64,
    pub local_minimum: bool,
}

pub fn verify_krr(cfg: &ExperimentConfig) -> Result<Vec<KrrCheck>> {
    cfg.validate()?;
    let n = cfg.n_grid[0];
    let m = cfg.m_values(n)?[0];
    let kernel = cfg.kernel_at(n)?;
    let truth = Arc::new(cfg.truth.build()?);
    let data = sample_dataset(&truth, n, cfg.sigma, cfg.base_seed)?;
    let eigen = if cfg.strategies.iter().any(|s| s.needs_gram_eigen()) {
        Some(gram_eigen(&kernel, &data)?)
    } else {
        None
    };
    cfg.strategies
        .iter()
        .map(|&strategy| {
            let blocks = build_blocks(strategy, &kernel, &data, m, eigen.as_ref(), derived_seed(cfg.base_seed, DPP_SALT))?;
            let problem = KrrProblem::new(&data, &blocks)?;
            let post = fit_variational(&kernel, &data, blocks)?;
            let a = post.mean_weights();
            let residual = problem.stationarity_residual(a)?;
            let base = problem.krr_objective(a)?;
            let mut local_minimum = true;
            for j in 0..m {
                for s in [-1e-3, 1e-3] {
                    let mut b = a.clone();
                    b[j] += s * a[j].abs().max(1.0);
                    local_minimum &= problem.krr_objective(&b)? >= base;
                }
            }
            Ok(KrrCheck {
                strategy,
                n,
                m,
                residual,
                hessian_min_eigenvalue: problem.hessian_min_eigenvalue()?,
                local_minimum,
            })
        })
        .collect()
}

/// Contents of the metadata sidecar.
#[derive(Clone, Debug, Serialize)]
pub struct Metadata<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub git_hash: &'a str,
    pub prng: &'a str,
    pub normal_sampler: &'a str,
    pub base_seed: u64,
    pub replicate_seed_rule: &'a str,
    pub config: &'a ExperimentConfig,
    pub warnings: &'a [String],
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn git_hash() -> &'static str {
    option_env!("SVGP_GIT_HASH").unwrap_or("unknown")
}

pub const METADATA_FILE: &str = "metadata.json";

/// Writes `metadata.json` into `dir`, creating the directory.
pub fn write_metadata(dir: &Path, command: &str, cfg: &ExperimentConfig, warnings: &[String]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let meta = Metadata {
        command,
        version: VERSION,
        git_hash: git_hash(),
        prng: PRNG_NAME,
        normal_sampler: NORMAL_SAMPLER,
        base_seed: cfg.base_seed,
        replicate_seed_rule: "dataset seed = base_seed + replicate; inducing and radius seeds derived by splitmix64",
        config: cfg,
        warnings,
    };
    let path = dir.join(METADATA_FILE);
    let mut w = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}
