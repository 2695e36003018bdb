//! `L²(μ)` credible balls, coverage indicators and pointwise bands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::posterior::{midpoint_grid, Prediction, VariationalPosterior, DEFAULT_GRID, DEFAULT_QUADRATURE};
use crate::synthetic_data::TrueFunction;

pub const MIN_MC_SAMPLES: usize = 1000;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
/// Tail eigenvalues sampled term by term before the moment-matched remainder.
pub const EXPLICIT_TAIL_TERMS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMethod {
    SpectralQuadForm,
    GridMonteCarlo,
}

/// `Σ_i w_i Z_i² + c χ²_k` with independent standard normals `Z_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedChiSquare {
    weights: Vec<f64>,
    remainder: Option<(f64, f64)>,
}

impl WeightedChiSquare {
    pub fn new(weights: Vec<f64>) -> Self {
        WeightedChiSquare {
            weights: weights.into_iter().filter(|&w| w > 0.0).collect(),
            remainder: None,
        }
    }

    /// `head` and the first `explicit` tail weights term by term; the rest by a
    /// scaled χ² with matching mean and variance.
    pub fn with_tail(head: &[f64], tail: &[f64], explicit: usize) -> Self {
        let k = explicit.min(tail.len());
        let mut out = Self::new(head.iter().chain(&tail[..k]).copied().collect());
        let rest = &tail[k..];
        let s1: f64 = rest.iter().rev().filter(|&&w| w > 0.0).sum();
        let s2: f64 = rest.iter().rev().filter(|&&w| w > 0.0).map(|w| w * w).sum();
        if s1 > 0.0 && s2 > 0.0 {
            out.remainder = Some((s2 / s1, s1 * s1 / s2));
        }
        out
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.remainder.map_or(0.0, |(c, k)| c * k)
    }

    /// One draw; the remainder uses its own generator so that the term-by-term
    /// part sees the same normals whatever the remainder's shape.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        remainder: Option<(&ChiSquared<f64>, &mut R)>,
    ) -> f64 {
        let mut s = 0.0;
        for w in &self.weights {
            let z: f64 = rng.sample(StandardNormal);
            s += w * z * z;
        }
        if let (Some((c, _)), Some((chi, rem_rng))) = (self.remainder, remainder) {
            s += c * chi.sample(rem_rng);
        }
        s
    }

    /// Empirical `prob`-quantile from `samples` draws.
    pub fn quantile(&self, prob: f64, samples: usize, seed: u64) -> Result<f64> {
        if !(prob > 0.0 && prob < 1.0) {
            return Err(Error::config("gamma", format!("level must lie in (0,1), got {prob}")));
        }
        if samples == 0 {
            return Err(Error::config("mc_samples", "need at least one sample"));
        }
        if self.weights.is_empty() && self.remainder.is_none() {
            return Ok(0.0);
        }
        let chi = match self.remainder {
            Some((_, k)) => Some(ChiSquared::new(k).map_err(|e| {
                Error::numeric("invalid remainder degrees of freedom", format!("k = {k}: {e}"))
            })?),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rem_rng = ChaCha8Rng::seed_from_u64(seed);
        rem_rng.set_stream(1);
        let mut draws: Vec<f64> = (0..samples)
            .map(|_| self.sample(&mut rng, chi.as_ref().map(|c| (c, &mut rem_rng))))
            .collect();
        let idx = ((prob * samples as f64).ceil() as usize).clamp(1, samples) - 1;
        let (_, q, _) = draws.select_nth_unstable_by(idx, f64::total_cmp);
        Ok(*q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibleBall {
    pub gamma: f64,
    pub radius: f64,
    pub method: RadiusMethod,
    pub mc_samples: usize,
    pub seed: u64,
}

fn check_radius_args(gamma: f64, mc_samples: usize) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config("gamma", format!("must lie in (0,1), got {gamma}")));
    }
    if mc_samples < MIN_MC_SAMPLES {
        return Err(Error::config(
            "mc_samples",
            format!("need at least {MIN_MC_SAMPLES} samples for a stable quantile, got {mc_samples}"),
        ));
    }
    Ok(())
}

/// Law of `‖f − f̂‖²` under the posterior.
pub fn spread_law(posterior: &VariationalPosterior, method: RadiusMethod) -> Result<WeightedChiSquare> {
    match method {
        RadiusMethod::SpectralQuadForm => {
            let (a, tail) = posterior.spectral_coefficient_law()?;
            let mut head = symmetric_eigen(a, "A")?;
            head.clamp_small_negative(1e-12);
            Ok(WeightedChiSquare::with_tail(&head.values, tail, EXPLICIT_TAIL_TERMS))
        }
        RadiusMethod::GridMonteCarlo => {
            let q = DEFAULT_GRID;
            let cov = posterior.covariance_matrix(&midpoint_grid(q))?;
            let mut eig = symmetric_eigen(&cov, "posterior covariance on grid")?;
            eig.clamp_small_negative(1e-12);
            Ok(WeightedChiSquare::new(eig.values.iter().map(|v| v / q as f64).collect()))
        }
    }
}

pub fn default_method(posterior: &VariationalPosterior) -> RadiusMethod {
    if posterior.spectral_law().is_some() {
        RadiusMethod::SpectralQuadForm
    } else {
        RadiusMethod::GridMonteCarlo
    }
}

/// Radius `ρ` of the `(1−γ)` credible ball around the posterior mean.
pub fn radius(posterior: &VariationalPosterior, gamma: f64, mc_samples: usize, seed: u64) -> Result<CredibleBall> {
    radius_with(posterior, default_method(posterior), gamma, mc_samples, seed)
}

pub fn radius_with(
    posterior: &VariationalPosterior,
    method: RadiusMethod,
    gamma: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<CredibleBall> {
    check_radius_args(gamma, mc_samples)?;
    let law = spread_law(posterior, method)?;
    let r2 = law.quantile(1.0 - gamma, mc_samples, seed)?;
    Ok(CredibleBall {
        gamma,
        radius: r2.max(0.0).sqrt(),
        method,
        mc_samples,
        seed,
    })
}

/// `‖f̂ − f₀‖`: coefficients on the spectral path, quadrature otherwise.
pub fn l2_distance_to_truth(posterior: &VariationalPosterior, truth: &TrueFunction) -> Result<f64> {
    match posterior.spectral_law() {
        Some(law) => {
            let head: f64 = law
                .coefficients
                .iter()
                .enumerate()
                .map(|(k, c)| (c - truth.coefficient(k + 1)).powi(2))
                .sum();
            Ok((head + truth.tail_l2_sq(law.m())).sqrt())
        }
        None => l2_distance_quadrature(posterior, truth, DEFAULT_QUADRATURE),
    }
}

/// `(∫ (f̂ − f₀)² dμ)^{1/2}` by the `q`-point midpoint rule, using the generic mean.
pub fn l2_distance_quadrature(posterior: &VariationalPosterior, truth: &TrueFunction, q: usize) -> Result<f64> {
    let grid = midpoint_grid(q);
    let mean = posterior.predict_general_many(&grid)?.mean;
    let f0 = truth.eval_many(&grid)?;
    let ss: f64 = mean.iter().zip(&f0).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / q as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub distance: f64,
    pub ball: CredibleBall,
}

impl Coverage {
    pub fn covered(&self, blowup: f64) -> bool {
        self.distance <= blowup * self.ball.radius
    }
}

/// Distance and radius for a coverage check; see [`Coverage::covered`].
pub fn coverage(
    posterior: &VariationalPosterior,
    truth: &TrueFunction,
    gamma: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<Coverage> {
    let ball = radius(posterior, gamma, mc_samples, seed)?;
    let distance = l2_distance_to_truth(posterior, truth)?;
    Ok(Coverage { distance, ball })
}

/// 1 iff `‖f̂ − f₀‖ ≤ M ρ`.
pub fn coverage_indicator(
    posterior: &VariationalPosterior,
    truth: &TrueFunction,
    gamma: f64,
    blowup: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<u8> {
    if !(blowup > 0.0) {
        return Err(Error::config("blowup", format!("must be positive, got {blowup}")));
    }
    Ok(coverage(posterior, truth, gamma, mc_samples, seed)?.covered(blowup) as u8)
}

/// `z_{1−γ/2}`.
pub fn normal_quantile(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config("gamma", format!("must lie in (0,1), got {gamma}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - gamma / 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BandPoint {
    pub x: f64,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn bands_from_prediction(grid: &[f64], pred: &Prediction, gamma: f64) -> Result<Vec<BandPoint>> {
    let z = normal_quantile(gamma)?;
    Ok(grid
        .iter()
        .zip(pred.mean.iter().zip(&pred.variance))
        .map(|(&x, (&mean, &var))| {
            let sd = var.max(0.0).sqrt();
            BandPoint {
                x,
                mean,
                sd,
                lower: mean - z * sd,
                upper: mean + z * sd,
            }
        })
        .collect())
}

/// `mean(x) ± z_{1−γ/2} sd(x)` on `grid`.
pub fn pointwise_band(posterior: &VariationalPosterior, grid: &[f64], gamma: f64) -> Result<Vec<BandPoint>> {
    bands_from_prediction(grid, &posterior.predict_many(grid)?, gamma)
}
