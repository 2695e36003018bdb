//! Kernel ridge regression over the span of the inducing cross-covariances.
//!
//! Independent check of the variational mean: its weights minimise
//! `‖y − K_fu a‖² + σ² a' K_uu a`. Everything here is recomputed from the raw
//! blocks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inducing::InducingBlocks;
use crate::linalg::symmetric_eigen;
use crate::synthetic_data::Dataset;

#[derive(Clone, Debug)]
pub struct KrrProblem {
    kuu: DMatrix<f64>,
    kfu: DMatrix<f64>,
    y: DVector<f64>,
    sigma2: f64,
}

impl KrrProblem {
    pub fn new(data: &Dataset, blocks: &InducingBlocks) -> Result<Self> {
        if blocks.n() != data.len() {
            return Err(Error::Domain(format!(
                "blocks have {} rows but the data has {} points",
                blocks.n(),
                data.len()
            )));
        }
        Ok(KrrProblem {
            kuu: blocks.kuu.clone(),
            kfu: blocks.kfu.clone(),
            y: DVector::from_column_slice(&data.y),
            sigma2: data.sigma2(),
        })
    }

    pub fn m(&self) -> usize {
        self.kuu.nrows()
    }

    fn check(&self, a: &DVector<f64>) -> Result<()> {
        if a.len() != self.m() {
            return Err(Error::Domain(format!(
                "coefficient vector has length {} but m = {}",
                a.len(),
                self.m()
            )));
        }
        Ok(())
    }

    /// Same problem with responses multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        KrrProblem {
            y: &self.y * c,
            ..self.clone()
        }
    }

    /// `‖Σ a_j h_j‖²_H = a' K_uu a`.
    pub fn rkhs_norm_sq(&self, a: &DVector<f64>) -> Result<f64> {
        self.check(a)?;
        Ok(a.dot(&(&self.kuu * a)))
    }

    /// `(y − K_fu a)'(y − K_fu a) + σ² a' K_uu a`.
    pub fn krr_objective(&self, a: &DVector<f64>) -> Result<f64> {
        self.check(a)?;
        let r = &self.y - &self.kfu * a;
        Ok(r.norm_squared() + self.sigma2 * self.rkhs_norm_sq(a)?)
    }

    /// `−K_uf y + (σ² K_uu + K_uf K_fu) a`, half the gradient of the objective.
    pub fn score(&self, a: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(a)?;
        let fitted = &self.kfu * a;
        Ok(-(self.kfu.transpose() * &self.y) + &self.kuu * a * self.sigma2 + self.kfu.transpose() * fitted)
    }

    /// `‖score(a)‖ / (1 + ‖K_uf y‖)`.
    pub fn stationarity_residual(&self, a: &DVector<f64>) -> Result<f64> {
        let kuf_y = self.kfu.transpose() * &self.y;
        Ok(self.score(a)?.norm() / (1.0 + kuf_y.norm()))
    }

    /// `2(σ² K_uu + K_uf K_fu)`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let mut h = (self.kfu.transpose() * &self.kfu + &self.kuu * self.sigma2) * 2.0;
        crate::linalg::symmetrize_upper(&mut h);
        h
    }

    pub fn hessian_min_eigenvalue(&self) -> Result<f64> {
        let eig = symmetric_eigen(&self.hessian(), "KRR Hessian")?;
        Ok(eig.values.last().copied().unwrap_or(0.0))
    }
}
