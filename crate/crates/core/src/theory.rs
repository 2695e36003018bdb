//! Closed-form rate quantities: `ν_j`, `B_n`, `W_n`, `V_n`, `R_n` and `J_n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral_kernel::{EigenSpectrum, SpectralKernel};
use crate::synthetic_data::{CoefficientTail, TrueFunction};

/// Relative slack in `n λ_j ≥ 1` so that exact boundary cases such as
/// `2500 · 50⁻²` are not lost to rounding.
pub const ELBOW_SLACK: f64 = 1e-12;
const ELBOW_SEARCH_CAP: usize = 1 << 40;

/// `ν = nλ / (σ² + nλ)`.
pub fn nu(n: usize, lambda: f64, sigma2: f64) -> f64 {
    let nl = n as f64 * lambda;
    if nl == 0.0 {
        return 0.0;
    }
    nl / (sigma2 + nl)
}

fn above_elbow(spectrum: &EigenSpectrum, n: usize, j: usize) -> bool {
    n as f64 * spectrum.eigenvalue_unchecked(j) >= 1.0 - ELBOW_SLACK
}

/// `J_n = max{j : n λ_j ≥ 1}`, or 0 when `n λ_1 < 1`.
pub fn effective_dim(spectrum: &EigenSpectrum, n: usize) -> usize {
    if n == 0 || !above_elbow(spectrum, n, 1) {
        return 0;
    }
    let mut lo = 1;
    let mut hi = 2;
    while hi < ELBOW_SEARCH_CAP && above_elbow(spectrum, n, hi) {
        lo = hi;
        hi *= 2;
    }
    // above_elbow(lo) holds and above_elbow(hi) fails
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if above_elbow(spectrum, n, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Rate terms for one `(n, m)` configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTerms {
    pub n: usize,
    pub m: usize,
    pub nu: Vec<f64>,
    pub b_n: f64,
    pub w_n: f64,
    pub v_n: f64,
    pub r_n: f64,
    pub j_n: usize,
}

/// Direct summation of `B_n`, `W_n`, `V_n` and `R_n = (B_n + W_n)/V_n`.
///
/// The prior is the truncated kernel; the truth contributes its stored
/// coefficients plus its closed-form tail.
pub fn rate_terms(
    kernel: &SpectralKernel,
    truth: &TrueFunction,
    n: usize,
    m: usize,
    sigma2: f64,
) -> Result<RateTerms> {
    if n == 0 {
        return Err(Error::config("n", "need n >= 1"));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::config("sigma", "noise variance must be positive"));
    }
    if m > kernel.truncation() {
        return Err(Error::config(
            "m",
            format!("m = {m} exceeds the kernel truncation {}", kernel.truncation()),
        ));
    }
    if truth.tail() != CoefficientTail::Finite && truth.truncation() < m {
        return Err(Error::config(
            "truth.terms",
            format!("truth truncation {} is below m = {m}", truth.truncation()),
        ));
    }
    let nu: Vec<f64> = kernel.eigenvalues()[..m]
        .iter()
        .map(|&l| self::nu(n, l, sigma2))
        .collect();
    let nf = n as f64;
    let b_head: f64 = nu
        .iter()
        .enumerate()
        .map(|(k, v)| (1.0 - v).powi(2) * truth.coefficient(k + 1).powi(2))
        .sum();
    let b_n = b_head + truth.tail_l2_sq(m);
    let w_n = nu.iter().map(|v| v * v).sum::<f64>() / nf;
    let v_n = nu.iter().sum::<f64>() / nf + kernel.tail_mass_after(m);
    let r_n = if v_n > 0.0 { (b_n + w_n) / v_n } else { f64::INFINITY };
    Ok(RateTerms {
        n,
        m,
        nu,
        b_n,
        w_n,
        v_n,
        r_n,
        j_n: effective_dim(kernel.spectrum(), n),
    })
}

/// The elbow-point forms of `B_n`, `V_n`, `W_n` (equal up to constants).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElbowForms {
    pub b_n: f64,
    pub v_n: f64,
    pub w_n: f64,
}

pub fn elbow_forms(kernel: &SpectralKernel, truth: &TrueFunction, n: usize, m: usize) -> ElbowForms {
    let j_n = effective_dim(kernel.spectrum(), n);
    let k = m.min(j_n).min(kernel.truncation());
    let nf = n as f64;
    let lam = kernel.eigenvalues();
    let b_head: f64 = (1..=k)
        .map(|j| (nf * lam[j - 1]).powi(-2) * truth.coefficient(j).powi(2))
        .sum();
    let b_n = b_head + truth.tail_l2_sq(k);
    let v_n = k as f64 / nf + kernel.tail_mass_after(k);
    let upper = m.min(kernel.truncation());
    let w_tail: f64 = if j_n >= 1 && j_n <= upper {
        (j_n..=upper).map(|j| lam[j - 1] * lam[j - 1]).sum()
    } else {
        0.0
    };
    let w_n = k as f64 / nf + nf * w_tail;
    ElbowForms { b_n, v_n, w_n }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Optimal,
    Undersmoothed,
    Oversmoothed,
    InsufficientM,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Optimal => "optimal",
            Regime::Undersmoothed => "undersmoothed",
            Regime::Oversmoothed => "oversmoothed",
            Regime::InsufficientM => "insufficient-m",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictedRate {
    /// Exponent `e` in `ε_n ≍ n^e`.
    pub exponent: f64,
    pub regime: Regime,
}

/// `ε_n = n^{-(β∧α)/(d+2α)}`, with the regime implied by `(α, β)` and the
/// growth exponent `r` of `m ≍ n^r`.
pub fn predicted_rate(alpha: f64, beta: f64, d: u32, r: Option<f64>) -> Result<PredictedRate> {
    if !(alpha > 0.0) || !(beta > 0.0) {
        return Err(Error::config("alpha/beta", "smoothness parameters must be positive"));
    }
    let df = d as f64;
    let exponent = -alpha.min(beta) / (df + 2.0 * alpha);
    let regime = match r {
        Some(r) if r < df / (df + 2.0 * alpha) => Regime::InsufficientM,
        _ if (alpha - beta).abs() <= 1e-12 * alpha.max(beta) => Regime::Optimal,
        _ if alpha > beta => Regime::Oversmoothed,
        _ => Regime::Undersmoothed,
    };
    Ok(PredictedRate { exponent, regime })
}
