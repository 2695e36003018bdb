//! Inducing-variable covariance blocks for the four strategies, and an exact
//! fixed-size DPP sampler for inducing-point selection.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, SymmetricEigen};
use crate::spectral_kernel::SpectralKernel;
use crate::synthetic_data::Dataset;

/// Eigenvalues within `-EIGEN_CLAMP * trace` of zero are set to zero.
pub const EIGEN_CLAMP: f64 = 1e-12;
/// Minimum spacing between inducing points.
pub const DUPLICATE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    PopulationSpectral,
    SampleSpectral,
    EquidistantPoints,
    #[serde(rename = "m_dpp")]
    MDpp,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::PopulationSpectral,
        StrategyKind::SampleSpectral,
        StrategyKind::EquidistantPoints,
        StrategyKind::MDpp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::PopulationSpectral => "population_spectral",
            StrategyKind::SampleSpectral => "sample_spectral",
            StrategyKind::EquidistantPoints => "equidistant_points",
            StrategyKind::MDpp => "m_dpp",
        }
    }

    /// Needs the eigendecomposition of `K_ff`.
    pub fn needs_gram_eigen(self) -> bool {
        matches!(self, StrategyKind::SampleSpectral | StrategyKind::MDpp)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "strategy",
                    format!(
                        "unknown strategy '{s}' (expected one of population_spectral, sample_spectral, equidistant_points, m_dpp)"
                    ),
                )
            })
    }
}

/// How `k_xu(x)` is evaluated at new points.
#[derive(Clone, Debug)]
pub enum CrossCovariance {
    /// `k_xu(x)_j = λ_j φ_j(x)`.
    Spectral,
    /// `k_xu(x) = g(x)' map` with `g(x)_j = √λ_j φ_j(x)` over the kernel truncation.
    Features { map: DMatrix<f64> },
}

/// Strategy-specific data kept for inspection and metadata.
#[derive(Clone, Debug)]
pub enum Payload {
    Spectral,
    Points {
        z: Vec<f64>,
        /// Design indices when the points were selected from the data.
        indices: Option<Vec<usize>>,
    },
    SampleSpectral {
        /// Top-`m` eigenvalues `μ_j` of `K_ff`.
        eigenvalues: Vec<f64>,
        /// Matching eigenvectors as columns (`n × m`).
        vectors: DMatrix<f64>,
    },
}

/// `(K_uu, K_fu, k_xu)` for one strategy on one dataset.
#[derive(Clone, Debug)]
pub struct InducingBlocks {
    pub kind: StrategyKind,
    pub kuu: DMatrix<f64>,
    pub kfu: DMatrix<f64>,
    pub cross: CrossCovariance,
    pub payload: Payload,
    truncation: usize,
}

impl InducingBlocks {
    pub fn m(&self) -> usize {
        self.kuu.nrows()
    }

    pub fn n(&self) -> usize {
        self.kfu.nrows()
    }

    /// Inducing points for point strategies.
    pub fn points(&self) -> Option<&[f64]> {
        match &self.payload {
            Payload::Points { z, .. } => Some(z),
            _ => None,
        }
    }

    /// Selected design indices (m-DPP).
    pub fn selected_indices(&self) -> Option<&[usize]> {
        match &self.payload {
            Payload::Points { indices: Some(i), .. } => Some(i),
            _ => None,
        }
    }

    fn check_kernel(&self, kernel: &SpectralKernel) -> Result<()> {
        if kernel.truncation() != self.truncation {
            return Err(Error::Domain(format!(
                "blocks were built with truncation {} but kernel has {}",
                self.truncation,
                kernel.truncation()
            )));
        }
        Ok(())
    }

    /// `k_xu(x)` as a length-`m` vector.
    pub fn cross_cov(&self, kernel: &SpectralKernel, x: f64) -> Result<DVector<f64>> {
        let row = self.cross_cov_matrix(kernel, &[x])?;
        Ok(row.row(0).transpose())
    }

    /// Rows `k_xu(x_i)'` stacked into a `len × m` matrix.
    pub fn cross_cov_matrix(&self, kernel: &SpectralKernel, xs: &[f64]) -> Result<DMatrix<f64>> {
        self.check_kernel(kernel)?;
        match &self.cross {
            CrossCovariance::Spectral => {
                let m = self.m();
                let mut phi = kernel.basis().design_matrix(xs, m)?;
                for (j, mut col) in phi.column_iter_mut().enumerate() {
                    col *= kernel.eigenvalues()[j];
                }
                Ok(phi)
            }
            CrossCovariance::Features { map } => Ok(kernel.scaled_features(xs)? * map),
        }
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::config("m", "need at least one inducing variable"));
    }
    Ok(())
}

/// `u_j = ⟨f, φ_j⟩`: `K_uu = Λ`, `K_fu = ΦΛ`.
pub fn population_spectral_blocks(
    kernel: &SpectralKernel,
    data: &Dataset,
    m: usize,
) -> Result<InducingBlocks> {
    check_m(m)?;
    if m > kernel.truncation() {
        return Err(Error::config(
            "m",
            format!(
                "m = {m} exceeds the kernel truncation J_trunc = {}",
                kernel.truncation()
            ),
        ));
    }
    let lambda = &kernel.eigenvalues()[..m];
    let kuu = DMatrix::from_diagonal(&DVector::from_column_slice(lambda));
    let mut kfu = kernel.basis().design_matrix(&data.x, m)?;
    for (j, mut col) in kfu.column_iter_mut().enumerate() {
        col *= lambda[j];
    }
    Ok(InducingBlocks {
        kind: StrategyKind::PopulationSpectral,
        kuu,
        kfu,
        cross: CrossCovariance::Spectral,
        payload: Payload::Spectral,
        truncation: kernel.truncation(),
    })
}

/// Eigendecomposition of `K_ff` with round-off negatives clamped to zero.
pub fn gram_eigen(kernel: &SpectralKernel, data: &Dataset) -> Result<SymmetricEigen> {
    let kff = kernel.gram_sym(&data.x)?;
    let mut eig = symmetric_eigen(&kff, "K_ff")?;
    eig.clamp_small_negative(EIGEN_CLAMP);
    Ok(eig)
}

/// `u_j = v_j' f(x)` for the top-`m` eigenvectors of `K_ff`.
pub fn sample_spectral_blocks(
    kernel: &SpectralKernel,
    data: &Dataset,
    m: usize,
) -> Result<InducingBlocks> {
    check_m(m)?;
    if m > data.len() {
        return Err(Error::config(
            "m",
            format!("m = {m} exceeds the number of observations n = {}", data.len()),
        ));
    }
    let eig = gram_eigen(kernel, data)?;
    sample_spectral_blocks_from_eigen(kernel, data, &eig, m)
}

/// As [`sample_spectral_blocks`] with a precomputed [`gram_eigen`].
pub fn sample_spectral_blocks_from_eigen(
    kernel: &SpectralKernel,
    data: &Dataset,
    eig: &SymmetricEigen,
    m: usize,
) -> Result<InducingBlocks> {
    check_m(m)?;
    let n = data.len();
    if eig.values.len() != n {
        return Err(Error::Domain(format!(
            "eigendecomposition has dimension {} but n = {n}",
            eig.values.len()
        )));
    }
    if m > n {
        return Err(Error::config(
            "m",
            format!("m = {m} exceeds the number of observations n = {n}"),
        ));
    }
    let mu: Vec<f64> = eig.values[..m].iter().map(|v| v.max(0.0)).collect();
    let vectors = eig.vectors.columns(0, m).into_owned();
    let kuu = DMatrix::from_diagonal(&DVector::from_column_slice(&mu));
    let mut kfu = vectors.clone();
    for (j, mut col) in kfu.column_iter_mut().enumerate() {
        col *= mu[j];
    }
    let map = kernel.scaled_features(&data.x)?.transpose() * &vectors;
    Ok(InducingBlocks {
        kind: StrategyKind::SampleSpectral,
        kuu,
        kfu,
        cross: CrossCovariance::Features { map },
        payload: Payload::SampleSpectral {
            eigenvalues: mu,
            vectors,
        },
        truncation: kernel.truncation(),
    })
}

/// Cell midpoints `z_j = -π + (j - 1/2) 2π/m`.
pub fn equidistant_points(m: usize) -> Result<Vec<f64>> {
    check_m(m)?;
    let h = 2.0 * PI / m as f64;
    Ok((1..=m).map(|j| -PI + (j as f64 - 0.5) * h).collect())
}

/// `u_j = f(z_j)`.
pub fn point_blocks(kernel: &SpectralKernel, data: &Dataset, z: &[f64]) -> Result<InducingBlocks> {
    point_blocks_with(kernel, data, z.to_vec(), None, StrategyKind::EquidistantPoints)
}

fn point_blocks_with(
    kernel: &SpectralKernel,
    data: &Dataset,
    z: Vec<f64>,
    indices: Option<Vec<usize>>,
    kind: StrategyKind,
) -> Result<InducingBlocks> {
    check_m(z.len())?;
    let mut sorted = z.clone();
    sorted.sort_by(f64::total_cmp);
    if let Some(w) = sorted.windows(2).find(|w| w[1] - w[0] < DUPLICATE_TOL) {
        return Err(Error::config(
            "inducing.z",
            format!("duplicate inducing points near {} (singular K_uu)", w[0]),
        ));
    }
    let gz = kernel.scaled_features(&z)?;
    let gx = kernel.scaled_features(&data.x)?;
    let mut kuu = &gz * gz.transpose();
    crate::linalg::symmetrize_upper(&mut kuu);
    let kfu = &gx * gz.transpose();
    Ok(InducingBlocks {
        kind,
        kuu,
        kfu,
        cross: CrossCovariance::Features {
            map: gz.transpose(),
        },
        payload: Payload::Points { z, indices },
        truncation: kernel.truncation(),
    })
}

/// Point blocks at design points chosen by an m-DPP with `L = K_ff`.
pub fn mdpp_blocks(
    kernel: &SpectralKernel,
    data: &Dataset,
    sampler: &MDppSampler,
    m: usize,
    seed: u64,
) -> Result<InducingBlocks> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sampler.sample(m, &mut rng)?;
    let z = idx.iter().map(|&i| data.x[i]).collect();
    point_blocks_with(kernel, data, z, Some(idx), StrategyKind::MDpp)
}

/// Exact sampler for the fixed-size DPP with L-ensemble kernel `L`.
#[derive(Clone, Debug)]
pub struct MDppSampler {
    eigen: SymmetricEigen,
}

impl MDppSampler {
    pub fn new(l: &DMatrix<f64>) -> Result<Self> {
        let mut eigen = symmetric_eigen(l, "m-DPP kernel")?;
        eigen.clamp_small_negative(EIGEN_CLAMP);
        Ok(MDppSampler { eigen })
    }

    pub fn from_eigen(eigen: SymmetricEigen) -> Self {
        MDppSampler { eigen }
    }

    pub fn dim(&self) -> usize {
        self.eigen.values.len()
    }

    /// Eigenvalues above `1e-12 · trace`.
    pub fn effective_rank(&self) -> usize {
        let tol = EIGEN_CLAMP * self.eigen.trace().abs();
        self.eigen.values.iter().filter(|&&v| v > tol).count()
    }

    /// Draws `m` distinct indices, returned in increasing order.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Vec<usize>> {
        check_m(m)?;
        let rank = self.effective_rank();
        if m > rank {
            return Err(Error::config(
                "m",
                format!("m = {m} exceeds the effective rank {rank} of the DPP kernel"),
            ));
        }
        let n = self.dim();
        let lambda: Vec<f64> = self.eigen.values.iter().map(|v| v.max(0.0)).collect();
        let chosen = select_eigenvectors(&lambda, m, rng);
        let mut v = DMatrix::from_fn(n, m, |i, c| self.eigen.vectors[(i, chosen[c])]);
        let mut out = Vec::with_capacity(m);
        let mut cols = m;
        while cols > 0 {
            let weights: Vec<f64> = (0..n)
                .map(|i| (0..cols).map(|c| v[(i, c)] * v[(i, c)]).sum())
                .collect();
            let i = sample_categorical(&weights, rng);
            out.push(i);
            // column with the largest entry in row i is eliminated
            let (pivot, _) = (0..cols)
                .map(|c| (c, v[(i, c)].abs()))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            let pv = v.column(pivot).into_owned();
            let pi = pv[i];
            let mut next = DMatrix::zeros(n, cols - 1);
            let mut k = 0;
            for c in 0..cols {
                if c == pivot {
                    continue;
                }
                let factor = v[(i, c)] / pi;
                let col = v.column(c) - &pv * factor;
                next.set_column(k, &col);
                k += 1;
            }
            gram_schmidt(&mut next);
            v = next;
            cols -= 1;
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Backward selection of `k` eigen-directions using elementary symmetric
/// polynomials; each column is rescaled to stay in floating-point range.
fn select_eigenvectors<R: Rng + ?Sized>(lambda: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let n = lambda.len();
    // e[c][l] ~ e_l(λ_1..λ_c) * exp(-scale[c])
    let mut e = vec![vec![0.0f64; k + 1]; n + 1];
    let mut log_scale = vec![0.0f64; n + 1];
    e[0][0] = 1.0;
    for c in 1..=n {
        let lam = lambda[c - 1];
        let mut col = vec![0.0; k + 1];
        col[0] = e[c - 1][0];
        for l in 1..=k {
            col[l] = e[c - 1][l] + lam * e[c - 1][l - 1];
        }
        let peak = col.iter().cloned().fold(0.0f64, f64::max);
        let s = if peak > 0.0 { peak } else { 1.0 };
        for v in &mut col {
            *v /= s;
        }
        log_scale[c] = log_scale[c - 1] + s.ln();
        e[c] = col;
    }
    let mut chosen = Vec::with_capacity(k);
    let mut l = k;
    let mut c = n;
    while l > 0 && c > 0 {
        let denom = e[c][l];
        let p = if denom > 0.0 {
            let ratio = (log_scale[c - 1] - log_scale[c]).exp();
            (lambda[c - 1] * e[c - 1][l - 1] * ratio / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
        // forced when the remaining columns cannot supply l directions
        if c == l || rng.random::<f64>() < p {
            chosen.push(c - 1);
            l -= 1;
        }
        c -= 1;
    }
    chosen
}

fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if target < w {
                return i;
            }
            target -= w;
        }
    }
    last
}

fn gram_schmidt(v: &mut DMatrix<f64>) {
    for c in 0..v.ncols() {
        for p in 0..c {
            let proj = v.column(p).dot(&v.column(c));
            let prev = v.column(p).into_owned();
            let mut col = v.column_mut(c);
            col -= prev * proj;
        }
        let norm = v.column(c).norm();
        if norm > 0.0 {
            v.column_mut(c).unscale_mut(norm);
        }
    }
}

/// Draws an m-DPP sample with kernel `L` from a fresh generator seeded with `seed`.
pub fn mdpp_sample(l: &DMatrix<f64>, m: usize, seed: u64) -> Result<Vec<usize>> {
    let sampler = MDppSampler::new(l)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sampler.sample(m, &mut rng)
}

/// Builds the blocks for `kind`; `eigen` is reused when given.
pub fn build_blocks(
    kind: StrategyKind,
    kernel: &SpectralKernel,
    data: &Dataset,
    m: usize,
    eigen: Option<&SymmetricEigen>,
    seed: u64,
) -> Result<InducingBlocks> {
    match kind {
        StrategyKind::PopulationSpectral => population_spectral_blocks(kernel, data, m),
        StrategyKind::EquidistantPoints => point_blocks(kernel, data, &equidistant_points(m)?),
        StrategyKind::SampleSpectral => match eigen {
            Some(e) => sample_spectral_blocks_from_eigen(kernel, data, e, m),
            None => sample_spectral_blocks(kernel, data, m),
        },
        StrategyKind::MDpp => {
            let sampler = match eigen {
                Some(e) => MDppSampler::from_eigen(e.clone()),
                None => MDppSampler::from_eigen(gram_eigen(kernel, data)?),
            };
            mdpp_blocks(kernel, data, &sampler, m, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral_kernel::EigenSpectrum;
    use approx::assert_relative_eq;

    fn kernel() -> SpectralKernel {
        SpectralKernel::with_truncation(EigenSpectrum::polynomial(0.5, 1).unwrap(), 200).unwrap()
    }

    #[test]
    fn equidistant_examples() {
        assert_eq!(equidistant_points(1).unwrap(), vec![0.0]);
        let z = equidistant_points(2).unwrap();
        assert_relative_eq!(z[0], -PI / 2.0);
        assert_relative_eq!(z[1], PI / 2.0);
        let z = equidistant_points(37).unwrap();
        assert!(z.windows(2).all(|w| w[1] > w[0]));
        assert!(z[0] > -PI && z[36] < PI);
    }

    #[test]
    fn population_blocks_single_point() {
        let k = kernel();
        let data = Dataset::new(vec![0.0], vec![1.0], 0.1).unwrap();
        let b = population_spectral_blocks(&k, &data, 1).unwrap();
        assert_eq!(b.kuu[(0, 0)], 1.0);
        assert_eq!(b.kfu[(0, 0)], 1.0);
        assert!(population_spectral_blocks(&k, &data, 201).is_err());
    }

    #[test]
    fn population_blocks_are_diagonal() {
        let k = kernel();
        let data = Dataset::new(vec![-1.0, 0.3, 2.0], vec![0.0; 3], 0.1).unwrap();
        let b = population_spectral_blocks(&k, &data, 7).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    assert_eq!(b.kuu[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn sample_spectral_rank_one_gram() {
        let k = SpectralKernel::with_truncation(EigenSpectrum::polynomial(0.5, 1).unwrap(), 1).unwrap();
        let data = Dataset::new(vec![0.0, 1.0], vec![0.0; 2], 0.1).unwrap();
        let b = sample_spectral_blocks(&k, &data, 2).unwrap();
        // rank one: K_ff = [[1,1],[1,1]] -> eigenvalues (2, 0)
        assert_relative_eq!(b.kuu[(0, 0)], 2.0, epsilon = 1e-12);
        assert!(b.kuu[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn duplicate_points_rejected() {
        let k = kernel();
        let data = Dataset::new(vec![0.0], vec![0.0], 0.1).unwrap();
        let err = point_blocks(&k, &data, &[0.5, 0.1, 0.5]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "inducing.z"));
    }

    #[test]
    fn mdpp_full_set() {
        let l = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5, 4.0]));
        assert_eq!(mdpp_sample(&l, 4, 3).unwrap(), vec![0, 1, 2, 3]);
        assert!(mdpp_sample(&l, 5, 3).is_err());
    }

    #[test]
    fn mdpp_rejects_rank_deficiency() {
        let v = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let l = &v * v.transpose();
        assert!(matches!(
            mdpp_sample(&l, 2, 0).unwrap_err(),
            Error::Config { .. }
        ));
        assert_eq!(mdpp_sample(&l, 1, 0).unwrap().len(), 1);
    }

    #[test]
    fn esp_selection_handles_wide_spectra() {
        let lambda: Vec<f64> = (0..3000).map(|j| 1e6 * (-(j as f64) / 20.0).exp()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chosen = select_eigenvectors(&lambda, 60, &mut rng);
        assert_eq!(chosen.len(), 60);
        let mut sorted = chosen.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 60);
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("nope".parse::<StrategyKind>().is_err());
    }
}
