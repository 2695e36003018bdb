use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svgp::inducing::{build_blocks, gram_eigen, StrategyKind};
use svgp::krr_oracle::KrrProblem;
use svgp::posterior::fit_variational;
use svgp::{sample_dataset, EigenSpectrum, SpectralKernel, TrueFunction};

fn setup() -> (SpectralKernel, svgp::Dataset) {
    let k = SpectralKernel::new(EigenSpectrum::polynomial(0.5, 1).unwrap(), Default::default()).unwrap();
    let truth = Arc::new(TrueFunction::lacunary_series(0.5, 10_000).unwrap());
    let d = sample_dataset(&truth, 200, 0.1, 31).unwrap();
    (k, d)
}

#[test]
fn fitted_weights_are_stationary_and_minimal() {
    let (k, d) = setup();
    let eig = gram_eigen(&k, &d).unwrap();
    for kind in StrategyKind::ALL {
        let blocks = build_blocks(kind, &k, &d, 20, Some(&eig), 3).unwrap();
        let problem = KrrProblem::new(&d, &blocks).unwrap();
        let post = fit_variational(&k, &d, blocks).unwrap();
        let a = post.mean_weights().clone();
        let res = problem.stationarity_residual(&a).unwrap();
        assert!(res < 1e-8, "{kind}: residual {res}");

        let base = problem.krr_objective(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let mut delta = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
            delta *= 1e-3 / delta.norm();
            assert!(problem.krr_objective(&(&a + delta)).unwrap() >= base, "{kind}");
        }
        for j in 0..20 {
            for s in [-1e-2, 1e-2] {
                let mut b = a.clone();
                b[j] += s;
                assert!(problem.krr_objective(&b).unwrap() > base, "{kind}: direction {j}");
            }
        }
        assert!(problem.hessian_min_eigenvalue().unwrap() > 0.0, "{kind}");
    }
}

#[test]
fn score_is_linear_in_data_and_weights() {
    let (k, d) = setup();
    let blocks = build_blocks(StrategyKind::EquidistantPoints, &k, &d, 20, None, 0).unwrap();
    let problem = KrrProblem::new(&d, &blocks).unwrap();
    let a = DVector::from_fn(20, |i, _| (i as f64 * 0.37).sin());
    for c in [1e-3, 7.5] {
        let scaled = problem.scaled(c);
        let s1 = problem.score(&a).unwrap() * c;
        let s2 = scaled.score(&(&a * c)).unwrap();
        assert!((&s1 - &s2).norm() <= 1e-12 * s2.norm());
    }
    let post = fit_variational(&k, &d, blocks).unwrap();
    let a_star = post.mean_weights();
    for c in [1e-3, 7.5] {
        let r = problem.scaled(c).stationarity_residual(&(a_star * c)).unwrap();
        assert!(r < 1e-8, "{r}");
    }
}

#[test]
fn rkhs_norm_is_a_quadratic_form() {
    let (k, d) = setup();
    let blocks = build_blocks(StrategyKind::PopulationSpectral, &k, &d, 5, None, 0).unwrap();
    let problem = KrrProblem::new(&d, &blocks).unwrap();
    let a = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0]);
    let expected: f64 = (0..5).map(|j| a[j] * a[j] * k.eigenvalues()[j]).sum();
    assert!((problem.rkhs_norm_sq(&a).unwrap() - expected).abs() < 1e-14);
}
