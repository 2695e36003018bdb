//! Exact and variational Gaussian-process posteriors.
//!
//! The variational posterior stores `a★ = B⁻¹ K_uf y` with
//! `B = σ² K_uu + K_uf K_fu`, so that `mean(x) = k_xu(x)' a★` and
//!
//! ```text
//! var(x) = k(x,x) − ‖L_uu⁻¹ k_xu(x)‖² + σ² ‖L_B⁻¹ k_xu(x)‖².
//! ```
//!
//! Population spectral features additionally get the closed form with
//! `A = (Λ⁻¹ + σ⁻² Φ'Φ)⁻¹`, computed from the design independently of the
//! generic blocks.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::inducing::{InducingBlocks, StrategyKind};
use crate::linalg::{cholesky_jittered, symmetrize_upper, JitteredCholesky};
use crate::spectral_kernel::SpectralKernel;
use crate::synthetic_data::Dataset;

/// Default number of midpoint nodes for `L²(μ)` integrals on the general path.
pub const DEFAULT_QUADRATURE: usize = 4096;
/// Default grid size for exported curves.
pub const DEFAULT_GRID: usize = 512;

const CHUNK: usize = 512;

/// Midpoint nodes `-π + (k + 1/2) 2π/q`.
pub fn midpoint_grid(q: usize) -> Vec<f64> {
    let h = 2.0 * PI / q as f64;
    (0..q).map(|k| -PI + (k as f64 + 0.5) * h).collect()
}

/// Closed-form spectral quantities for population spectral features.
#[derive(Clone, Debug)]
pub struct SpectralLaw {
    /// `A = (Λ⁻¹ + σ⁻² Φ'Φ)⁻¹`.
    pub a: DMatrix<f64>,
    /// Posterior mean coefficients `⟨f̂, φ_j⟩`, `j ≤ m`.
    pub coefficients: DVector<f64>,
    /// `λ_j` for `m < j ≤ J_trunc`.
    pub tail_eigenvalues: Vec<f64>,
}

impl SpectralLaw {
    fn fit(kernel: &SpectralKernel, x: &[f64], y: &[f64], sigma2: f64, m: usize) -> Result<Self> {
        let phi = kernel.basis().design_matrix(x, m)?;
        let sqrt_l: Vec<f64> = kernel.eigenvalues()[..m].iter().map(|l| l.sqrt()).collect();
        // M = I + σ⁻² Λ^{1/2} Φ'Φ Λ^{1/2}
        let gram = phi.transpose() * &phi;
        let mut mm = DMatrix::from_fn(m, m, |i, j| sqrt_l[i] * gram[(i, j)] * sqrt_l[j] / sigma2);
        for i in 0..m {
            mm[(i, i)] += 1.0;
        }
        symmetrize_upper(&mut mm);
        let chol = cholesky_jittered(&mm, "I + Λ^{1/2}Φ'ΦΛ^{1/2}/σ²")?;
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&sqrt_l));
        let mut a = &d * chol.solve(&d);
        symmetrize_upper(&mut a);
        let rhs = phi.transpose() * DVector::from_column_slice(y) / sigma2;
        let coefficients = &a * rhs;
        Ok(SpectralLaw {
            a,
            coefficients,
            tail_eigenvalues: kernel.eigenvalues()[m..].to_vec(),
        })
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    /// `Ψ‖f − f̂‖² = tr(A) + Σ_{j>m} λ_j`.
    pub fn spread(&self) -> f64 {
        self.a.trace() + self.tail_eigenvalues.iter().rev().sum::<f64>()
    }
}

/// Fitted variational posterior.
#[derive(Clone, Debug)]
pub struct VariationalPosterior {
    kernel: SpectralKernel,
    blocks: InducingBlocks,
    x: Vec<f64>,
    y: Vec<f64>,
    sigma2: f64,
    a_star: DVector<f64>,
    chol_uu: JitteredCholesky,
    chol_b: JitteredCholesky,
    spectral: Option<SpectralLaw>,
}

fn check_sigma(data: &Dataset) -> Result<f64> {
    let sigma2 = data.sigma2();
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Domain(format!(
            "fitting needs a positive noise level, got σ = {}",
            data.sigma
        )));
    }
    Ok(sigma2)
}

/// Fits the optimal Gaussian law of `u` for the given blocks.
pub fn fit_variational(
    kernel: &SpectralKernel,
    data: &Dataset,
    blocks: InducingBlocks,
) -> Result<VariationalPosterior> {
    let sigma2 = check_sigma(data)?;
    let n = data.len();
    let m = blocks.m();
    if blocks.n() != n || blocks.kfu.ncols() != m || blocks.kuu.ncols() != m {
        return Err(Error::Domain(format!(
            "block shapes K_uu {}x{}, K_fu {}x{} do not match n = {n}",
            blocks.kuu.nrows(),
            blocks.kuu.ncols(),
            blocks.kfu.nrows(),
            blocks.kfu.ncols()
        )));
    }
    let chol_uu = cholesky_jittered(&blocks.kuu, "K_uu")?;
    let mut b = blocks.kfu.transpose() * &blocks.kfu + &blocks.kuu * sigma2;
    symmetrize_upper(&mut b);
    let chol_b = cholesky_jittered(&b, "σ²K_uu + K_uf K_fu")?;
    let y = DVector::from_column_slice(&data.y);
    let a_star = chol_b.solve_vec(&(blocks.kfu.transpose() * &y));
    let spectral = if blocks.kind == StrategyKind::PopulationSpectral {
        Some(SpectralLaw::fit(kernel, &data.x, &data.y, sigma2, m)?)
    } else {
        None
    };
    Ok(VariationalPosterior {
        kernel: kernel.clone(),
        blocks,
        x: data.x.clone(),
        y: data.y.clone(),
        sigma2,
        a_star,
        chol_uu,
        chol_b,
        spectral,
    })
}

/// Mean and pointwise variance on a set of points.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl VariationalPosterior {
    pub fn kernel(&self) -> &SpectralKernel {
        &self.kernel
    }

    pub fn blocks(&self) -> &InducingBlocks {
        &self.blocks
    }

    pub fn kind(&self) -> StrategyKind {
        self.blocks.kind
    }

    pub fn m(&self) -> usize {
        self.blocks.m()
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn design(&self) -> &[f64] {
        &self.x
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    /// Mean coefficients `a★` with `mean(x) = k_xu(x)' a★`.
    pub fn mean_weights(&self) -> &DVector<f64> {
        &self.a_star
    }

    /// Ridges added to `K_uu` and `B`.
    pub fn jitter(&self) -> (f64, f64) {
        (self.chol_uu.jitter, self.chol_b.jitter)
    }

    pub fn spectral_law(&self) -> Option<&SpectralLaw> {
        self.spectral.as_ref()
    }

    /// `(mean, variance)` at `x`; spectral forms for population spectral features.
    pub fn predict(&self, x: f64) -> Result<(f64, f64)> {
        let p = self.predict_many(&[x])?;
        Ok((p.mean[0], p.variance[0]))
    }

    pub fn predict_many(&self, xs: &[f64]) -> Result<Prediction> {
        if self.spectral.is_some() {
            self.predict_spectral_many(xs)
        } else {
            self.predict_general_many(xs)
        }
    }

    /// Generic block formulas, available for every strategy.
    pub fn predict_general_many(&self, xs: &[f64]) -> Result<Prediction> {
        let mut mean = Vec::with_capacity(xs.len());
        let mut variance = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CHUNK) {
            let kxu = self.blocks.cross_cov_matrix(&self.kernel, chunk)?;
            let prior = self.kernel.diag_many(chunk)?;
            let kux = kxu.transpose();
            let q = self.chol_uu.solve_lower(&kux);
            let s = self.chol_b.solve_lower(&kux);
            let mu = &kxu * &self.a_star;
            for i in 0..chunk.len() {
                let qn = q.column(i).norm_squared();
                let sn = s.column(i).norm_squared();
                mean.push(mu[i]);
                variance.push((prior[i] - qn + self.sigma2 * sn).max(0.0));
            }
        }
        Ok(Prediction { mean, variance })
    }

    pub fn predict_general(&self, x: f64) -> Result<(f64, f64)> {
        let p = self.predict_general_many(&[x])?;
        Ok((p.mean[0], p.variance[0]))
    }

    /// Closed-form spectral path (population spectral features only).
    pub fn predict_spectral_many(&self, xs: &[f64]) -> Result<Prediction> {
        let law = self.spectral.as_ref().ok_or_else(|| {
            Error::Unsupported(format!(
                "spectral prediction needs population spectral features, got {}",
                self.kind()
            ))
        })?;
        let m = law.m();
        let mut mean = Vec::with_capacity(xs.len());
        let mut variance = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CHUNK) {
            let phi = self.kernel.basis().design_matrix(chunk, m)?;
            let mu = &phi * &law.coefficients;
            let pa = &phi * &law.a;
            for (i, &x) in chunk.iter().enumerate() {
                let head = pa.row(i).dot(&phi.row(i));
                let tail = self.kernel.diag_tail(x, m)?;
                mean.push(mu[i]);
                variance.push((head + tail).max(0.0));
            }
        }
        Ok(Prediction { mean, variance })
    }

    pub fn predict_spectral(&self, x: f64) -> Result<(f64, f64)> {
        let p = self.predict_spectral_many(&[x])?;
        Ok((p.mean[0], p.variance[0]))
    }

    /// Head covariance `A` and tail eigenvalues of the coefficient law of `f − f̂`.
    pub fn spectral_coefficient_law(&self) -> Result<(&DMatrix<f64>, &[f64])> {
        match &self.spectral {
            Some(law) => Ok((&law.a, &law.tail_eigenvalues)),
            None => Err(Error::Unsupported(format!(
                "the coefficient law is only available for population spectral features, got {}",
                self.kind()
            ))),
        }
    }

    /// `Ψ‖f − f̂‖²`: closed form on the spectral path, midpoint quadrature otherwise.
    pub fn posterior_l2_spread(&self) -> Result<f64> {
        match &self.spectral {
            Some(law) => Ok(law.spread()),
            None => self.posterior_l2_spread_quadrature(DEFAULT_QUADRATURE),
        }
    }

    /// `∫ k̂(x,x) dμ(x)` by the `q`-point midpoint rule.
    pub fn posterior_l2_spread_quadrature(&self, q: usize) -> Result<f64> {
        let grid = midpoint_grid(q);
        let p = self.predict_general_many(&grid)?;
        Ok(p.variance.iter().sum::<f64>() / q as f64)
    }

    /// Posterior covariance matrix on `grid` (generic formulas).
    pub fn covariance_matrix(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        let kxu = self.blocks.cross_cov_matrix(&self.kernel, grid)?;
        let kux = kxu.transpose();
        let q = self.chol_uu.solve_lower(&kux);
        let s = self.chol_b.solve_lower(&kux);
        let mut cov = self.kernel.gram_sym(grid)? - q.transpose() * &q + s.transpose() * &s * self.sigma2;
        symmetrize_upper(&mut cov);
        Ok(cov)
    }

    /// `count` joint draws on `grid`, one per row.
    pub fn sample_function(&self, grid: &[f64], count: usize, seed: u64) -> Result<DMatrix<f64>> {
        let mean = self.predict_many(grid)?.mean;
        let cov = self.covariance_matrix(grid)?;
        sample_gaussian(&mean, &cov, count, seed, "posterior covariance on grid")
    }

    /// Collapsed ELBO of these blocks on the fitted data.
    pub fn elbo(&self) -> Result<f64> {
        let data = Dataset::new(self.x.clone(), self.y.clone(), self.sigma2.sqrt())?;
        elbo(&self.kernel, &data, &self.blocks)
    }
}

/// Draws `count` samples of `N(mean, cov)` as rows.
pub fn sample_gaussian(
    mean: &[f64],
    cov: &DMatrix<f64>,
    count: usize,
    seed: u64,
    what: &str,
) -> Result<DMatrix<f64>> {
    let g = mean.len();
    let chol = cholesky_jittered(cov, what)?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(g, count, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut draws = (l * z).transpose();
    for mut row in draws.row_iter_mut() {
        for (v, mu) in row.iter_mut().zip(mean) {
            *v += mu;
        }
    }
    Ok(draws)
}

/// `log N(y | 0, Q_nn + σ²I) − tr(K_ff − Q_nn) / (2σ²)` with `Q_nn = K_fu K_uu⁻¹ K_uf`.
pub fn elbo(kernel: &SpectralKernel, data: &Dataset, blocks: &InducingBlocks) -> Result<f64> {
    let sigma2 = check_sigma(data)?;
    let n = data.len();
    let m = blocks.m();
    let chol_uu = cholesky_jittered(&blocks.kuu, "K_uu")?;
    // W = L_uu⁻¹ K_uf, so Q_nn = W'W
    let w = chol_uu.solve_lower(&blocks.kfu.transpose());
    let mut c = &w * w.transpose();
    for i in 0..m {
        c[(i, i)] += sigma2;
    }
    symmetrize_upper(&mut c);
    let chol_c = cholesky_jittered(&c, "σ²I + W W'")?;
    let y = DVector::from_column_slice(&data.y);
    let wy = chol_c.solve_lower_vec(&(&w * &y));
    let log_det = (n as f64 - m as f64) * sigma2.ln() + chol_c.log_det();
    let quad = (y.norm_squared() - wy.norm_squared()) / sigma2;
    let prior_trace: f64 = kernel.diag_many(&data.x)?.iter().sum();
    let trace = (prior_trace - w.norm_squared()).max(0.0);
    Ok(-0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * log_det - 0.5 * quad - trace / (2.0 * sigma2))
}

/// Conjugate posterior with all `n` observations.
#[derive(Clone, Debug)]
pub struct ExactPosterior {
    kernel: SpectralKernel,
    x: Vec<f64>,
    y: DVector<f64>,
    chol: JitteredCholesky,
    weights: DVector<f64>,
}

pub fn fit_exact(kernel: &SpectralKernel, data: &Dataset) -> Result<ExactPosterior> {
    let sigma2 = check_sigma(data)?;
    if data.is_empty() {
        return Err(Error::config("n", "the exact posterior needs at least one observation"));
    }
    let mut k = kernel.gram_sym(&data.x)?;
    for i in 0..data.len() {
        k[(i, i)] += sigma2;
    }
    let chol = cholesky_jittered(&k, "K_ff + σ²I")?;
    let y = DVector::from_column_slice(&data.y);
    let weights = chol.solve_vec(&y);
    Ok(ExactPosterior {
        kernel: kernel.clone(),
        x: data.x.clone(),
        y,
        chol,
        weights,
    })
}

impl ExactPosterior {
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn predict(&self, x: f64) -> Result<(f64, f64)> {
        let p = self.predict_many(&[x])?;
        Ok((p.mean[0], p.variance[0]))
    }

    pub fn predict_many(&self, xs: &[f64]) -> Result<Prediction> {
        let mut mean = Vec::with_capacity(xs.len());
        let mut variance = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CHUNK) {
            let kxf = self.kernel.gram(chunk, &self.x)?;
            let prior = self.kernel.diag_many(chunk)?;
            let v = self.chol.solve_lower(&kxf.transpose());
            let mu = &kxf * &self.weights;
            for i in 0..chunk.len() {
                mean.push(mu[i]);
                variance.push((prior[i] - v.column(i).norm_squared()).max(0.0));
            }
        }
        Ok(Prediction { mean, variance })
    }

    /// `log N(y | 0, K_ff + σ²I)`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y.len() as f64;
        -0.5 * self.y.dot(&self.weights) - 0.5 * self.chol.log_det() - 0.5 * n * (2.0 * PI).ln()
    }
}
