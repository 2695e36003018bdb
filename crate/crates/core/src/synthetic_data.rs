//! True regression functions (as basis coefficients) and seeded datasets.
//!
//! Randomness comes from `ChaCha8Rng` seeded with the dataset seed. Each
//! observation draws its design point and then its noise, so a dataset of
//! size `n` is a prefix of any larger dataset with the same seed.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral_kernel::FourierBasis;

/// Default number of coefficients kept for series truths.
pub const DEFAULT_TRUTH_TERMS: usize = 10_000;

/// Name of the generator recorded in run metadata.
pub const PRNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9), seed_from_u64";
/// Gaussian sampler recorded in run metadata.
pub const NORMAL_SAMPLER: &str = "rand_distr 0.5 StandardNormal (ziggurat)";

/// Closed-form description of the coefficients beyond the stored truncation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientTail {
    /// No mass beyond the stored coefficients.
    Finite,
    /// `⟨f, φ_j⟩ = j^{-exponent}` for every `j`.
    PowerLaw { exponent: f64 },
    /// `⟨f, φ_j⟩ = j^{-1/2-β} / log j` on multiples of three, zero elsewhere.
    ThirdHarmonics { beta: f64 },
}

/// A regression function `f = Σ_j c_j φ_j`, truncated at `J_f` terms.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueFunction {
    coefficients: Vec<f64>,
    tail: CoefficientTail,
}

/// Result of [`TrueFunction::sobolev_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SobolevNorm {
    /// Norm of the stored coefficients.
    pub value: f64,
    /// The untruncated series does not converge.
    pub divergent: bool,
}

impl TrueFunction {
    pub fn from_coefficients(coefficients: Vec<f64>) -> Self {
        TrueFunction {
            coefficients,
            tail: CoefficientTail::Finite,
        }
    }

    pub fn zero() -> Self {
        Self::from_coefficients(Vec::new())
    }

    /// `f = Σ_ℓ φ_{3ℓ} (3ℓ)^{-1/2-β} / log(3ℓ)`.
    pub fn lacunary_series(beta: f64, terms: usize) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::config("truth.beta", "beta must be positive"));
        }
        if terms < 3 {
            return Err(Error::config("truth.terms", "need at least 3 terms"));
        }
        let coefficients = (1..=terms)
            .map(|j| {
                if j % 3 == 0 {
                    let jf = j as f64;
                    jf.powf(-0.5 - beta) / jf.ln()
                } else {
                    0.0
                }
            })
            .collect();
        Ok(TrueFunction {
            coefficients,
            tail: CoefficientTail::ThirdHarmonics { beta },
        })
    }

    /// `f = Σ_j j^{-exponent} φ_j`.
    pub fn power_law(exponent: f64, terms: usize) -> Result<Self> {
        if !(exponent > 0.5) {
            return Err(Error::config(
                "truth.exponent",
                "exponent must exceed 1/2 for a square-summable series",
            ));
        }
        if terms == 0 {
            return Err(Error::config("truth.terms", "need at least 1 term"));
        }
        let coefficients = (1..=terms).map(|j| (j as f64).powf(-exponent)).collect();
        Ok(TrueFunction {
            coefficients,
            tail: CoefficientTail::PowerLaw { exponent },
        })
    }

    /// Truth with bias tail `≍ m^{-p/r}` used to show slow contraction when
    /// `m ≍ n^r` is too small: `⟨f, φ_j⟩ = j^{-(1+p/r)/2}`.
    ///
    /// Requires `2rβ/d < p < 2β/(d+2β)`.
    pub fn lower_bound(p: f64, r: f64, beta: f64, d: u32, terms: usize) -> Result<Self> {
        let df = d as f64;
        if !(r > 0.0) {
            return Err(Error::config("truth.r", "r must be positive"));
        }
        let lo = 2.0 * r * beta / df;
        let hi = 2.0 * beta / (df + 2.0 * beta);
        if !(p > lo) {
            return Err(Error::config(
                "truth.p",
                format!("violates 2*r*beta/d < p: need p > {lo}, got {p}"),
            ));
        }
        if !(p < hi) {
            return Err(Error::config(
                "truth.p",
                format!("violates p < 2*beta/(d+2*beta): need p < {hi}, got {p}"),
            ));
        }
        Self::power_law((1.0 + p / r) / 2.0, terms)
    }

    /// Truth rougher than the prior: `⟨f, φ_j⟩ = j^{-1/2-q}` with `β/d < q < α/d`.
    pub fn oversmooth(q: f64, alpha: f64, beta: f64, d: u32, terms: usize) -> Result<Self> {
        let df = d as f64;
        if !(q > beta / df) {
            return Err(Error::config(
                "truth.q",
                format!("violates beta/d < q: need q > {}, got {q}", beta / df),
            ));
        }
        if !(q < alpha / df) {
            return Err(Error::config(
                "truth.q",
                format!("violates q < alpha/d: need q < {}, got {q}", alpha / df),
            ));
        }
        Self::power_law(0.5 + q, terms)
    }

    /// Number of stored coefficients `J_f`.
    pub fn truncation(&self) -> usize {
        self.coefficients.len()
    }

    pub fn tail(&self) -> CoefficientTail {
        self.tail
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// `⟨f, φ_j⟩` (zero past the truncation).
    pub fn coefficient(&self, j: usize) -> f64 {
        if j == 0 {
            return 0.0;
        }
        self.coefficients.get(j - 1).copied().unwrap_or(0.0)
    }

    /// `f(x)` from the stored coefficients.
    pub fn eval(&self, x: f64) -> Result<f64> {
        FourierBasis::check_domain(x)?;
        let mut buf = vec![0.0; self.coefficients.len()];
        Ok(self.eval_with(x, &mut buf))
    }

    fn eval_with(&self, x: f64, buf: &mut [f64]) -> f64 {
        FourierBasis.fill(x, buf);
        self.coefficients.iter().zip(buf.iter()).map(|(c, p)| c * p).sum()
    }

    pub fn eval_many(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let mut buf = vec![0.0; self.coefficients.len()];
        xs.iter()
            .map(|&x| {
                FourierBasis::check_domain(x)?;
                Ok(self.eval_with(x, &mut buf))
            })
            .collect()
    }

    /// `‖f‖_{L²(μ)}` of the stored coefficients (Parseval).
    pub fn l2_norm(&self) -> f64 {
        self.coefficients.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// `Σ_{j > after} ⟨f, φ_j⟩²`: stored coefficients plus a closed-form bound
    /// for the part beyond the truncation.
    pub fn tail_l2_sq(&self, after: usize) -> f64 {
        let stored: f64 = self
            .coefficients
            .iter()
            .skip(after)
            .map(|c| c * c)
            .sum();
        stored + self.beyond_truncation_l2_sq()
    }

    /// Bound on `Σ_{j > J_f} ⟨f, φ_j⟩²` for the untruncated series.
    pub fn beyond_truncation_l2_sq(&self) -> f64 {
        let jf = self.truncation() as f64;
        match self.tail {
            CoefficientTail::Finite => 0.0,
            CoefficientTail::PowerLaw { exponent } => {
                jf.powf(1.0 - 2.0 * exponent) / (2.0 * exponent - 1.0)
            }
            CoefficientTail::ThirdHarmonics { beta } => {
                let lg = jf.ln();
                jf.powf(-2.0 * beta) / (3.0 * 2.0 * beta * lg * lg)
            }
        }
    }

    /// `(Σ_{j ≤ J_f} j^{2β/d} ⟨f, φ_j⟩²)^{1/2}` with a divergence flag for the
    /// untruncated series.
    pub fn sobolev_norm(&self, beta: f64, d: u32) -> SobolevNorm {
        let e = 2.0 * beta / d as f64;
        let value = self
            .coefficients
            .iter()
            .enumerate()
            .map(|(k, c)| ((k + 1) as f64).powf(e) * c * c)
            .sum::<f64>()
            .sqrt();
        let divergent = match self.tail {
            CoefficientTail::Finite => false,
            // Σ j^{e - 2·exponent} diverges iff e - 2·exponent ≥ -1
            CoefficientTail::PowerLaw { exponent } => e - 2.0 * exponent >= -1.0,
            // Σ j^{e-1-2b} / log² j converges at e = 2b
            CoefficientTail::ThirdHarmonics { beta: b } => e > 2.0 * b,
        };
        SobolevNorm { value, divergent }
    }
}

/// Observations `y_i = f₀(x_i) + ε_i` with `x_i ~ U[-π, π]`, `ε_i ~ N(0, σ²)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: f64,
    pub truth: Arc<TrueFunction>,
    pub seed: u64,
}

impl Dataset {
    /// Dataset from explicit observations; `truth` defaults to zero.
    pub fn new(x: Vec<f64>, y: Vec<f64>, sigma: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Domain(format!(
                "x has {} points but y has {}",
                x.len(),
                y.len()
            )));
        }
        for &xi in &x {
            FourierBasis::check_domain(xi)?;
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Domain(format!("noise level must be >= 0, got {sigma}")));
        }
        Ok(Dataset {
            x,
            y,
            sigma,
            truth: Arc::new(TrueFunction::zero()),
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// CSV with an `x,y` header and 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "y"])?;
        for (x, y) in self.x.iter().zip(&self.y) {
            w.write_record([format!("{x:.16e}"), format!("{y:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Draws `n` observations from `truth` with noise level `sigma`.
pub fn sample_dataset(truth: &Arc<TrueFunction>, n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("n", "need at least one observation"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config("sigma", format!("must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for _ in 0..n {
        x.push(rng.random_range(-PI..PI));
        let z: f64 = rng.sample(StandardNormal);
        noise.push(z);
    }
    let f = truth.eval_many(&x)?;
    let y = f.iter().zip(&noise).map(|(fi, z)| fi + sigma * z).collect();
    Ok(Dataset {
        x,
        y,
        sigma,
        truth: Arc::clone(truth),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lacunary_series_coefficients() {
        let f = TrueFunction::lacunary_series(0.5, 30).unwrap();
        assert_relative_eq!(f.coefficient(3), 0.303_413, epsilon = 5e-7);
        assert_eq!(f.coefficient(4), 0.0);
        assert_eq!(f.coefficient(31), 0.0);
        assert!(TrueFunction::lacunary_series(0.5, 2).is_err());
    }

    #[test]
    fn lacunary_series_sobolev_membership() {
        let f = TrueFunction::lacunary_series(0.5, 100).unwrap();
        assert!(!f.sobolev_norm(0.5, 1).divergent);
        assert!(f.sobolev_norm(0.75, 1).divergent);
        assert!(f.sobolev_norm(1.0, 1).divergent);

        // partial-sum oracle: at smoothness 0.5 the squared partial sums settle,
        // at smoothness 1.0 they keep growing (roughly like J / log² J)
        let sq = |beta: f64, jf: usize| {
            TrueFunction::lacunary_series(0.5, jf).unwrap().sobolev_norm(beta, 1).value.powi(2)
        };
        let (a, b, c) = (sq(0.5, 1_000), sq(0.5, 10_000), sq(0.5, 100_000));
        assert!(c - b < 0.7 * (b - a), "{a} {b} {c}");
        let (a, b, c) = (sq(1.0, 1_000), sq(1.0, 10_000), sq(1.0, 100_000));
        assert!(b > 4.0 * a && c > 4.0 * b, "{a} {b} {c}");
    }

    #[test]
    fn lower_bound_truth() {
        // p/r = 1 => exponent 1
        let f = TrueFunction::lower_bound(0.4, 0.4, 1.0, 1, 100);
        // admissible band for beta = 1: 0.8 < p < 2/3 is empty
        assert!(f.is_err());
        let f = TrueFunction::lower_bound(0.375, 0.375, 0.5, 1, 1000);
        assert!(f.is_err(), "2 r beta / d = 0.375 is not strictly below p");
        let f = TrueFunction::lower_bound(0.3, 0.3, 0.5, 1, 100);
        // 2rβ/d = 0.3 -> boundary excluded
        assert!(f.is_err());
        let f = TrueFunction::lower_bound(0.35, 0.25, 0.5, 1, 1000).unwrap();
        assert_relative_eq!(f.coefficient(4), 4f64.powf(-1.2), max_relative = 1e-14);
        assert!(f.coefficients().iter().all(|&c| c > 0.0));
        match TrueFunction::lower_bound(0.6, 0.25, 0.5, 1, 10) {
            Err(Error::Config { key, message }) => {
                assert_eq!(key, "truth.p");
                assert!(message.contains("p < 2*beta/(d+2*beta)"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lower_bound_unit_ratio_coefficient() {
        // p/r = 1: coefficient j^{-1}
        let f = TrueFunction::lower_bound(0.4, 0.4, 0.4, 1, 50).unwrap();
        assert_relative_eq!(f.coefficient(4), 0.25, max_relative = 1e-14);
    }

    #[test]
    fn lower_bound_tail_scales_like_power() {
        // Σ_{j>m} c_j² ≍ m^{-p/r}
        let (p, r) = (0.35, 0.25);
        let f = TrueFunction::lower_bound(p, r, 0.5, 1, 200_000).unwrap();
        let ratios: Vec<f64> = [50usize, 100, 200]
            .iter()
            .map(|&m| f.tail_l2_sq(m) / (m as f64).powf(-p / r))
            .collect();
        let (lo, hi) = ratios
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 2.0, "{ratios:?}");
    }

    #[test]
    fn oversmooth_truth() {
        let f = TrueFunction::oversmooth(1.0, 1.5, 0.5, 1, 100).unwrap();
        assert_relative_eq!(f.coefficient(2), 0.353_553, epsilon = 5e-7);
        assert_eq!(f.coefficient(1), 1.0);
        assert!(!f.sobolev_norm(0.9, 1).divergent);
        assert!(f.sobolev_norm(1.0, 1).divergent);
        assert!(TrueFunction::oversmooth(1.6, 1.5, 0.5, 1, 100).is_err());
        assert!(TrueFunction::oversmooth(0.4, 1.5, 0.5, 1, 100).is_err());
    }

    #[test]
    fn sobolev_norm_examples() {
        let f = TrueFunction::from_coefficients(vec![-0.7]);
        assert_relative_eq!(f.sobolev_norm(2.0, 1).value, 0.7);
        let g = TrueFunction::power_law(1.0, 10_000).unwrap();
        let v = g.sobolev_norm(0.0, 1).value;
        assert!((v - PI / 6f64.sqrt()).abs() < 1e-3, "{v}");
    }

    #[test]
    fn parseval_against_quadrature() {
        let f = TrueFunction::lacunary_series(0.5, 300).unwrap();
        let q = 4096;
        let nodes: Vec<f64> = (0..q)
            .map(|k| -PI + (k as f64 + 0.5) * 2.0 * PI / q as f64)
            .collect();
        let vals = f.eval_many(&nodes).unwrap();
        let quad = (vals.iter().map(|v| v * v).sum::<f64>() / q as f64).sqrt();
        assert!((quad - f.l2_norm()).abs() < 1e-4);
    }

    #[test]
    fn default_truncation_tail_is_negligible() {
        let f = TrueFunction::lacunary_series(0.5, DEFAULT_TRUTH_TERMS).unwrap();
        let head = f.l2_norm();
        let full = (head * head + f.beyond_truncation_l2_sq()).sqrt();
        assert!(full - head < 1e-5);
    }

    #[test]
    fn noiseless_data_is_exact() {
        let truth = Arc::new(TrueFunction::lacunary_series(0.5, 200).unwrap());
        let d = sample_dataset(&truth, 50, 0.0, 9).unwrap();
        for (x, y) in d.x.iter().zip(&d.y) {
            assert_eq!(*y, truth.eval(*x).unwrap());
        }
    }

    #[test]
    fn noise_mean_within_clt_bound() {
        let truth = Arc::new(TrueFunction::lacunary_series(0.5, 60).unwrap());
        let n = 100_000;
        let sigma = 0.1;
        let d = sample_dataset(&truth, n, sigma, 5).unwrap();
        let f = truth.eval_many(&d.x).unwrap();
        let mean = d.y.iter().zip(&f).map(|(y, f)| y - f).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn seeding_is_deterministic_and_nested() {
        let truth = Arc::new(TrueFunction::lacunary_series(0.5, 60).unwrap());
        let a = sample_dataset(&truth, 100, 0.1, 42).unwrap();
        let b = sample_dataset(&truth, 100, 0.1, 42).unwrap();
        let c = sample_dataset(&truth, 100, 0.1, 43).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_ne!(a.x[0], c.x[0]);
        let big = sample_dataset(&truth, 400, 0.1, 42).unwrap();
        assert_eq!(&big.x[..100], &a.x[..]);
        assert_eq!(&big.y[..100], &a.y[..]);
    }

    #[test]
    fn csv_export_round_trips() {
        let truth = Arc::new(TrueFunction::lacunary_series(0.5, 60).unwrap());
        let d = sample_dataset(&truth, 5, 0.1, 1).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y"));
        for (line, (x, y)) in lines.zip(d.x.iter().zip(&d.y)) {
            let mut parts = line.split(',');
            assert_eq!(parts.next().unwrap().parse::<f64>().unwrap(), *x);
            assert_eq!(parts.next().unwrap().parse::<f64>().unwrap(), *y);
        }
    }
}
