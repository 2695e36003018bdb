//! Mercer-form prior covariance kernels on `[-π, π]`.
//!
//! A kernel is `k(x, y) = Σ_{j ≤ J} λ_j φ_j(x) φ_j(y)` where `φ_j` is the
//! trigonometric basis (orthonormal under the uniform measure) and `λ_j` is
//! one of the eigenvalue families in [`EigenSpectrum`]. The truncation level
//! `J` is chosen from a closed-form bound on the omitted eigenvalue mass.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetrize_upper;

/// Default relative tolerance on the omitted eigenvalue mass.
pub const DEFAULT_TAIL_TOL: f64 = 1e-8;
/// Default cap on the number of series terms.
pub const DEFAULT_MAX_TERMS: usize = 2048;

/// Orthonormal trigonometric basis on `[-π, π]`:
/// `φ_1 = 1`, `φ_{2ℓ} = √2 cos(ℓx)`, `φ_{2ℓ+1} = √2 sin(ℓx)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourierBasis;

impl FourierBasis {
    /// Uniform bound `sup_j sup_x |φ_j(x)|`.
    pub const SUP_NORM: f64 = SQRT_2;

    pub fn check_domain(x: f64) -> Result<()> {
        if x.is_finite() && (-PI..=PI).contains(&x) {
            Ok(())
        } else {
            Err(Error::Domain(format!("point {x} outside [-pi, pi]")))
        }
    }

    /// `φ_j(x)` by direct evaluation.
    pub fn eval(&self, j: usize, x: f64) -> Result<f64> {
        if j == 0 {
            return Err(Error::Domain("basis index must be >= 1".into()));
        }
        Self::check_domain(x)?;
        if j == 1 {
            return Ok(1.0);
        }
        let l = (j / 2) as f64;
        Ok(if j % 2 == 0 {
            SQRT_2 * (l * x).cos()
        } else {
            SQRT_2 * (l * x).sin()
        })
    }

    /// Fills `out[k] = φ_{k+1}(x)` using the angle-addition recurrence.
    /// No domain check.
    pub fn fill(&self, x: f64, out: &mut [f64]) {
        if out.is_empty() {
            return;
        }
        out[0] = 1.0;
        let (s1, c1) = x.sin_cos();
        let (mut s, mut c) = (s1, c1);
        let mut k = 1;
        while k < out.len() {
            out[k] = SQRT_2 * c;
            if k + 1 < out.len() {
                out[k + 1] = SQRT_2 * s;
            }
            let c_next = c * c1 - s * s1;
            s = s * c1 + c * s1;
            c = c_next;
            k += 2;
        }
    }

    /// Values `φ_1(x), ..., φ_count(x)`.
    pub fn values(&self, x: f64, count: usize) -> Result<Vec<f64>> {
        Self::check_domain(x)?;
        let mut out = vec![0.0; count];
        self.fill(x, &mut out);
        Ok(out)
    }

    /// `n × count` matrix with rows `φ_{1:count}(x_i)`.
    pub fn design_matrix(&self, xs: &[f64], count: usize) -> Result<DMatrix<f64>> {
        for &x in xs {
            Self::check_domain(x)?;
        }
        let mut row = vec![0.0; count];
        let mut out = DMatrix::zeros(xs.len(), count);
        for (i, &x) in xs.iter().enumerate() {
            self.fill(x, &mut row);
            for (k, v) in row.iter().enumerate() {
                out[(i, k)] = *v;
            }
        }
        Ok(out)
    }
}

/// Eigenvalue families for the prior covariance operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EigenSpectrum {
    /// `λ_j = scale · j^{-1-2α/d}`.
    Polynomial { alpha: f64, d: u32, scale: f64 },
    /// `λ_j = scale · exp(-τ j^{1/d})`.
    ExponentialTheory { tau: f64, d: u32, scale: f64 },
    /// `λ_j = τ · exp(-τ j / 4)`.
    ExponentialExperiment { tau: f64 },
}

impl EigenSpectrum {
    pub fn polynomial(alpha: f64, d: u32) -> Result<Self> {
        let s = EigenSpectrum::Polynomial { alpha, d, scale: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn exponential_experiment(tau: f64) -> Result<Self> {
        let s = EigenSpectrum::ExponentialExperiment { tau };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EigenSpectrum::Polynomial { alpha, d, scale } => {
                positive("spectrum.alpha", alpha)?;
                positive("spectrum.scale", scale)?;
                if d == 0 {
                    return Err(Error::config("spectrum.d", "dimension must be >= 1"));
                }
            }
            EigenSpectrum::ExponentialTheory { tau, d, scale } => {
                positive("spectrum.tau", tau)?;
                positive("spectrum.scale", scale)?;
                if d == 0 {
                    return Err(Error::config("spectrum.d", "dimension must be >= 1"));
                }
            }
            EigenSpectrum::ExponentialExperiment { tau } => positive("spectrum.tau", tau)?,
        }
        Ok(())
    }

    /// `λ_j` for `j ≥ 1`.
    pub fn eigenvalue(&self, j: usize) -> Result<f64> {
        if j == 0 {
            return Err(Error::Domain("eigenvalue index must be >= 1".into()));
        }
        Ok(self.eigenvalue_unchecked(j))
    }

    pub(crate) fn eigenvalue_unchecked(&self, j: usize) -> f64 {
        let jf = j as f64;
        match *self {
            EigenSpectrum::Polynomial { alpha, d, scale } => {
                scale / jf.powf(1.0 + 2.0 * alpha / d as f64)
            }
            EigenSpectrum::ExponentialTheory { tau, d, scale } => {
                scale * (-tau * jf.powf(1.0 / d as f64)).exp()
            }
            EigenSpectrum::ExponentialExperiment { tau } => tau * (-tau * jf / 4.0).exp(),
        }
    }

    /// Closed-form upper bound on `Σ_{j > after} λ_j` (exact for the geometric case).
    pub fn tail_bound(&self, after: usize) -> f64 {
        match *self {
            EigenSpectrum::Polynomial { alpha, d, scale } => {
                if after == 0 {
                    return self.total_mass();
                }
                let excess = 2.0 * alpha / d as f64;
                scale * (after as f64).powf(-excess) / excess
            }
            EigenSpectrum::ExponentialTheory { tau, d, scale } => {
                if d == 1 {
                    let r = (-tau).exp();
                    return scale * (-tau * (after as f64 + 1.0)).exp() / (1.0 - r);
                }
                // ∫_J^∞ e^{-τ x^{1/d}} dx = d τ^{-d} Γ(d, τ J^{1/d})
                let z = tau * (after as f64).powf(1.0 / d as f64);
                let mut term = 1.0;
                let mut partial = 1.0;
                for k in 1..d {
                    term *= z / k as f64;
                    partial += term;
                }
                let factorial: f64 = (1..d).map(|k| k as f64).product();
                scale * d as f64 * tau.powi(-(d as i32)) * factorial * (-z).exp() * partial
            }
            EigenSpectrum::ExponentialExperiment { tau } => {
                let r = (-tau / 4.0).exp();
                tau * (-tau * (after as f64 + 1.0) / 4.0).exp() / (1.0 - r)
            }
        }
    }

    /// `Σ_{j ≥ 1} λ_j`.
    pub fn total_mass(&self) -> f64 {
        match *self {
            EigenSpectrum::Polynomial { alpha, d, scale } => {
                // Euler–Maclaurin after an explicit head of 1000 terms
                let p = 1.0 + 2.0 * alpha / d as f64;
                let head_len = 1000usize;
                let head: f64 = (1..=head_len).map(|j| (j as f64).powf(-p)).sum();
                let nf = head_len as f64;
                let tail = nf.powf(1.0 - p) / (p - 1.0) - 0.5 * nf.powf(-p)
                    + p / 12.0 * nf.powf(-p - 1.0);
                scale * (head + tail)
            }
            EigenSpectrum::ExponentialTheory { d: 1, tau, scale } => {
                let r = (-tau).exp();
                scale * r / (1.0 - r)
            }
            EigenSpectrum::ExponentialTheory { .. } => {
                let mut j = 1usize;
                let mut sum: f64 = 0.0;
                while self.tail_bound(j) > 1e-16 * sum.max(f64::MIN_POSITIVE) || j < 16 {
                    sum += self.eigenvalue_unchecked(j);
                    j += 1;
                    if j > 50_000_000 {
                        break;
                    }
                }
                sum + self.tail_bound(j - 1)
            }
            EigenSpectrum::ExponentialExperiment { tau } => {
                let r = (-tau / 4.0).exp();
                tau * r / (1.0 - r)
            }
        }
    }

    /// Smallest `J` whose tail bound is at most `tail_tol · total_mass`, or
    /// `None` if that exceeds `max_terms`.
    pub fn truncation_for(&self, tail_tol: f64, max_terms: usize) -> Option<usize> {
        let target = tail_tol * self.total_mass();
        if self.tail_bound(max_terms) > target {
            return None;
        }
        let (mut lo, mut hi) = (0usize, max_terms);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.tail_bound(mid) <= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi.max(1))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be a positive finite number, got {v}")))
    }
}

/// Rescaling `τ_n = n^{-1/(d+2α)} log n` for the exponential prior.
pub fn rescaling_tau(n: u64, alpha: f64, d: u32) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain(format!("rescaling needs n >= 2, got {n}")));
    }
    if !(alpha > 0.0) || d == 0 {
        return Err(Error::Domain("rescaling needs alpha > 0 and d >= 1".into()));
    }
    let nf = n as f64;
    Ok(nf.powf(-1.0 / (d as f64 + 2.0 * alpha)) * nf.ln())
}

/// How the truncation level is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationPolicy {
    #[serde(default = "default_tail_tol")]
    pub tail_tol: f64,
    #[serde(default = "default_max_terms")]
    pub max_terms: usize,
}

fn default_tail_tol() -> f64 {
    DEFAULT_TAIL_TOL
}

fn default_max_terms() -> usize {
    DEFAULT_MAX_TERMS
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy {
            tail_tol: DEFAULT_TAIL_TOL,
            max_terms: DEFAULT_MAX_TERMS,
        }
    }
}

/// Truncated Mercer kernel. Immutable after construction.
#[derive(Clone, Debug)]
pub struct SpectralKernel {
    spectrum: EigenSpectrum,
    basis: FourierBasis,
    eigenvalues: Vec<f64>,
    sqrt_eigenvalues: Vec<f64>,
    /// `suffix[k] = Σ_{j > k} λ_j` over the truncated series, `k = 0..=J`.
    suffix: Vec<f64>,
    capped: bool,
}

impl SpectralKernel {
    /// Kernel with an explicit truncation level.
    pub fn with_truncation(spectrum: EigenSpectrum, truncation: usize) -> Result<Self> {
        spectrum.validate()?;
        if truncation == 0 {
            return Err(Error::config("truncation", "truncation must be >= 1"));
        }
        let eigenvalues: Vec<f64> = (1..=truncation)
            .map(|j| spectrum.eigenvalue_unchecked(j))
            .collect();
        let mut suffix = vec![0.0; truncation + 1];
        for k in (0..truncation).rev() {
            suffix[k] = suffix[k + 1] + eigenvalues[k];
        }
        let sqrt_eigenvalues = eigenvalues.iter().map(|v| v.sqrt()).collect();
        Ok(SpectralKernel {
            spectrum,
            basis: FourierBasis,
            eigenvalues,
            sqrt_eigenvalues,
            suffix,
            capped: false,
        })
    }

    /// Kernel with the truncation picked from the tail bound; capped at
    /// `policy.max_terms` (see [`SpectralKernel::is_capped`]).
    pub fn new(spectrum: EigenSpectrum, policy: TruncationPolicy) -> Result<Self> {
        spectrum.validate()?;
        positive("truncation.tail_tol", policy.tail_tol)?;
        if policy.max_terms == 0 {
            return Err(Error::config("truncation.max_terms", "must be >= 1"));
        }
        match spectrum.truncation_for(policy.tail_tol, policy.max_terms) {
            Some(j) => Self::with_truncation(spectrum, j),
            None => {
                let mut k = Self::with_truncation(spectrum, policy.max_terms)?;
                k.capped = true;
                Ok(k)
            }
        }
    }

    pub fn spectrum(&self) -> &EigenSpectrum {
        &self.spectrum
    }

    pub fn basis(&self) -> &FourierBasis {
        &self.basis
    }

    /// Number of series terms `J`.
    pub fn truncation(&self) -> usize {
        self.eigenvalues.len()
    }

    /// True when the tail tolerance could not be met within `max_terms`.
    pub fn is_capped(&self) -> bool {
        self.capped
    }

    /// `λ_1, ..., λ_J`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvalue(&self, j: usize) -> Result<f64> {
        if j == 0 || j > self.truncation() {
            return Err(Error::Domain(format!(
                "eigenvalue index {j} outside 1..={}",
                self.truncation()
            )));
        }
        Ok(self.eigenvalues[j - 1])
    }

    /// `Σ_{after < j ≤ J} λ_j`.
    pub fn tail_mass_after(&self, after: usize) -> f64 {
        self.suffix[after.min(self.truncation())]
    }

    /// `Σ_j λ_j` over the truncated series (the prior's total variance).
    pub fn trace(&self) -> f64 {
        self.suffix[0]
    }

    /// Upper bound on the eigenvalue mass dropped by the truncation.
    pub fn omitted_tail_bound(&self) -> f64 {
        self.spectrum.tail_bound(self.truncation())
    }

    /// `k(x, y)`; exactly symmetric in its arguments.
    pub fn kernel_eval(&self, x: f64, y: f64) -> Result<f64> {
        FourierBasis::check_domain(x)?;
        FourierBasis::check_domain(y)?;
        let jt = self.truncation();
        let mut px = vec![0.0; jt];
        let mut py = vec![0.0; jt];
        self.basis.fill(x, &mut px);
        self.basis.fill(y, &mut py);
        Ok(self
            .eigenvalues
            .iter()
            .zip(px.iter().zip(&py))
            .map(|(l, (a, b))| l * (a * b))
            .sum())
    }

    /// `k(x, x)`.
    pub fn diag(&self, x: f64) -> Result<f64> {
        FourierBasis::check_domain(x)?;
        let mut px = vec![0.0; self.truncation()];
        self.basis.fill(x, &mut px);
        Ok(self.diag_from_features(&px))
    }

    fn diag_from_features(&self, px: &[f64]) -> f64 {
        self.eigenvalues
            .iter()
            .zip(px)
            .map(|(l, a)| l * (a * a))
            .sum()
    }

    /// `Σ_{j > after} λ_j φ_j(x)²` over the truncated series.
    pub fn diag_tail(&self, x: f64, after: usize) -> Result<f64> {
        FourierBasis::check_domain(x)?;
        let mut px = vec![0.0; self.truncation()];
        self.basis.fill(x, &mut px);
        let start = after.min(px.len());
        Ok(self.eigenvalues[start..]
            .iter()
            .zip(&px[start..])
            .map(|(l, a)| l * (a * a))
            .sum())
    }

    /// Rows `√λ_j φ_j(x_i)`, so that `K = G Gᵀ`.
    pub fn scaled_features(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        let mut g = self.basis.design_matrix(xs, self.truncation())?;
        for (k, mut col) in g.column_iter_mut().enumerate() {
            col *= self.sqrt_eigenvalues[k];
        }
        Ok(g)
    }

    /// Cross-covariance matrix `[k(x_i, y_j)]`.
    pub fn gram(&self, xs: &[f64], ys: &[f64]) -> Result<DMatrix<f64>> {
        let gx = self.scaled_features(xs)?;
        let gy = self.scaled_features(ys)?;
        Ok(gx * gy.transpose())
    }

    /// Symmetric covariance matrix `[k(x_i, x_j)]`.
    pub fn gram_sym(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        let g = self.scaled_features(xs)?;
        let mut k = &g * g.transpose();
        symmetrize_upper(&mut k);
        Ok(k)
    }

    /// `k(x_i, x_i)` for every point.
    pub fn diag_many(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let mut px = vec![0.0; self.truncation()];
        xs.iter()
            .map(|&x| {
                FourierBasis::check_domain(x)?;
                self.basis.fill(x, &mut px);
                Ok(self.diag_from_features(&px))
            })
            .collect()
    }
}
