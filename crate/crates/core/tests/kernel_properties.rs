use std::f64::consts::PI;

use nalgebra::DMatrix;
use proptest::prelude::*;
use svgp::linalg::symmetric_eigen;
use svgp::{EigenSpectrum, FourierBasis, SpectralKernel};

fn points() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-PI..=PI, 1..40)
}

fn spectra() -> impl Strategy<Value = EigenSpectrum> {
    prop_oneof![
        (0.3f64..2.0).prop_map(|a| EigenSpectrum::polynomial(a, 1).unwrap()),
        (0.05f64..2.0).prop_map(|t| EigenSpectrum::exponential_experiment(t).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_is_symmetric_psd(s in spectra(), xs in points()) {
        let k = SpectralKernel::new(s, Default::default()).unwrap();
        let g = k.gram_sym(&xs).unwrap();
        prop_assert_eq!(&g, &g.transpose());
        let eig = symmetric_eigen(&g, "gram").unwrap();
        let top = eig.values[0].abs().max(f64::MIN_POSITIVE);
        prop_assert!(*eig.values.last().unwrap() >= -1e-8 * top);
    }

    #[test]
    fn kernel_eval_matches_gram(s in spectra(), x in -PI..=PI, y in -PI..=PI) {
        let k = SpectralKernel::new(s, Default::default()).unwrap();
        let g = k.gram(&[x], &[y]).unwrap();
        let direct = k.kernel_eval(x, y).unwrap();
        prop_assert!((g[(0, 0)] - direct).abs() <= 1e-12 * k.trace());
        prop_assert!((k.kernel_eval(y, x).unwrap() - direct).abs() <= 1e-12 * k.trace());
        prop_assert!(direct.abs() <= 2.0 * k.trace() + 1e-12);
    }

    #[test]
    fn basis_is_bounded(j in 1usize..5000, x in -PI..=PI) {
        let v = FourierBasis.eval(j, x).unwrap();
        prop_assert!(v.abs() <= FourierBasis::SUP_NORM + 1e-15);
    }
}

#[test]
fn basis_is_orthonormal() {
    // midpoint rule is exact for trigonometric polynomials of degree < q
    let q = 256;
    let grid: Vec<f64> = (0..q).map(|i| -PI + (i as f64 + 0.5) * 2.0 * PI / q as f64).collect();
    let phi = FourierBasis.design_matrix(&grid, 20).unwrap();
    let gram = phi.transpose() * &phi / q as f64;
    assert!((gram - DMatrix::identity(20, 20)).amax() < 1e-12);
}

#[test]
fn out_of_domain_is_rejected() {
    let k = SpectralKernel::new(EigenSpectrum::polynomial(0.5, 1).unwrap(), Default::default()).unwrap();
    assert!(k.kernel_eval(4.0, 0.0).is_err());
    assert!(FourierBasis.eval(0, 0.0).is_err());
    assert!(k.gram_sym(&[0.0, f64::NAN]).is_err());
}
