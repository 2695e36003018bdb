use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use svgp::inducing::{
    mdpp_sample, point_blocks, population_spectral_blocks, sample_spectral_blocks, InducingBlocks,
    MDppSampler, Payload,
};
use svgp::{Dataset, EigenSpectrum, SpectralKernel};

fn small_kernel() -> SpectralKernel {
    SpectralKernel::with_truncation(EigenSpectrum::polynomial(0.5, 1).unwrap(), 40).unwrap()
}

/// Monte Carlo check that `(u, f(x))` has covariance `(K_uu, K_fu)` under the prior.
fn prior_sampling_oracle(k: &SpectralKernel, blocks: &InducingBlocks, x: &[f64], functional: impl Fn(&DVector<f64>) -> DVector<f64>) {
    let draws = 100_000;
    let g = k.scaled_features(x).unwrap();
    let m = blocks.m();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut sum_uu = DMatrix::zeros(m, m);
    let mut sum_fu = DMatrix::zeros(x.len(), m);
    let mut sq_fu = DMatrix::zeros(x.len(), m);
    for _ in 0..draws {
        let z = DVector::from_fn(k.truncation(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = functional(&z);
        let f = &g * &z;
        sum_uu += &u * u.transpose();
        let fu = &f * u.transpose();
        sq_fu += fu.component_mul(&fu);
        sum_fu += fu;
    }
    let nd = draws as f64;
    for i in 0..x.len() {
        for j in 0..m {
            let mean = sum_fu[(i, j)] / nd;
            let se = ((sq_fu[(i, j)] / nd - mean * mean) / nd).sqrt();
            assert!((mean - blocks.kfu[(i, j)]).abs() <= 3.0 * se + 1e-12, "K_fu[{i},{j}]: {mean} vs {}", blocks.kfu[(i, j)]);
        }
    }
    for i in 0..m {
        let est = sum_uu[(i, i)] / nd;
        assert!((est / blocks.kuu[(i, i)] - 1.0).abs() < 0.05, "K_uu[{i},{i}]: {est} vs {}", blocks.kuu[(i, i)]);
    }
}

#[test]
fn population_blocks_match_prior_draws() {
    let k = small_kernel();
    let x = vec![-1.3, 0.4, 2.2];
    let d = Dataset::new(x.clone(), vec![0.0; 3], 0.1).unwrap();
    let b = population_spectral_blocks(&k, &d, 2).unwrap();
    let sqrt_l: Vec<f64> = k.eigenvalues().iter().map(|l| l.sqrt()).collect();
    // u_j = ⟨f, φ_j⟩ = √λ_j z_j
    prior_sampling_oracle(&k, &b, &x, |z| DVector::from_fn(2, |j, _| sqrt_l[j] * z[j]));
}

#[test]
fn point_blocks_match_prior_draws() {
    let k = small_kernel();
    let x = vec![-1.3, 0.4, 2.2];
    let zs = vec![-2.0, 1.0];
    let d = Dataset::new(x.clone(), vec![0.0; 3], 0.1).unwrap();
    let b = point_blocks(&k, &d, &zs).unwrap();
    let gz = k.scaled_features(&zs).unwrap();
    prior_sampling_oracle(&k, &b, &x, |z| &gz * z);
}

#[test]
fn sample_spectral_blocks_match_prior_draws() {
    let k = small_kernel();
    let x = vec![-1.3, 0.4, 2.2];
    let d = Dataset::new(x.clone(), vec![0.0; 3], 0.1).unwrap();
    let b = sample_spectral_blocks(&k, &d, 2).unwrap();
    let v = match &b.payload {
        Payload::SampleSpectral { vectors, .. } => vectors.clone(),
        _ => unreachable!(),
    };
    let gx = k.scaled_features(&x).unwrap();
    prior_sampling_oracle(&k, &b, &x, |z| v.transpose() * (&gx * z));
}

#[test]
fn sample_spectral_vectors_are_orthonormal() {
    let k = SpectralKernel::new(EigenSpectrum::polynomial(0.5, 1).unwrap(), Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..200).map(|_| rng.random_range(-3.1..3.1)).collect();
    let d = Dataset::new(x, vec![0.0; 200], 0.1).unwrap();
    let b = sample_spectral_blocks(&k, &d, 60).unwrap();
    let Payload::SampleSpectral { eigenvalues, vectors } = &b.payload else {
        unreachable!()
    };
    let gram = vectors.transpose() * vectors;
    assert!((gram - DMatrix::identity(60, 60)).amax() < 1e-8);
    assert!(eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    assert!(*eigenvalues.last().unwrap() >= 0.0);
}

#[test]
fn point_kuu_is_exactly_symmetric() {
    let k = SpectralKernel::new(EigenSpectrum::polynomial(0.5, 1).unwrap(), Default::default()).unwrap();
    let d = Dataset::new(vec![0.0], vec![0.0], 0.1).unwrap();
    let b = point_blocks(&k, &d, &[-2.9, -1.0, 0.2, 1.7, 3.0]).unwrap();
    assert_eq!(b.kuu, b.kuu.transpose());
    let single = point_blocks(&k, &d, &[0.8]).unwrap();
    assert!(single.kuu[(0, 0)] > 0.0);
}

#[test]
fn identity_dpp_is_uniform() {
    let l = DMatrix::identity(5, 5);
    let sampler = MDppSampler::new(&l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 20_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(sampler.sample(2, &mut rng).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 10);
    let expected = draws as f64 / 10.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 0.999 quantile of χ²₉
    assert!(chi2 < 27.877, "{chi2}");
}

#[test]
fn dpp_diagonal_marginal() {
    let l = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
    let sampler = MDppSampler::new(&l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws = 20_000;
    let hits = (0..draws).filter(|_| sampler.sample(1, &mut rng).unwrap() == vec![1]).count();
    assert!((hits as f64 / draws as f64 - 0.75).abs() < 0.015);
}

#[test]
fn dpp_prefers_diverse_points() {
    // two nearly collinear items and one orthogonal item
    let v = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.999, 0.0447, 0.0, 1.0]);
    let l = &v * v.transpose();
    let mut together = 0;
    for seed in 0..2000 {
        if mdpp_sample(&l, 2, seed).unwrap() == vec![0, 1] {
            together += 1;
        }
    }
    assert!(together < 20, "{together}");
}

#[test]
fn dpp_is_deterministic_given_seed() {
    let k = SpectralKernel::new(EigenSpectrum::polynomial(0.5, 1).unwrap(), Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..100).map(|_| rng.random_range(-3.1..3.1)).collect();
    let l = k.gram_sym(&x).unwrap();
    let a = mdpp_sample(&l, 20, 5).unwrap();
    assert_eq!(a, mdpp_sample(&l, 20, 5).unwrap());
    assert_eq!(a.len(), 20);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
}
