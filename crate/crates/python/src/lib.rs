//! Python bindings for `svgp`.

use std::sync::Arc;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyNotImplementedError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use svgp::credible::{coverage, radius};
use svgp::inducing::{build_blocks, StrategyKind};
use svgp::spectral_kernel::rescaling_tau as tau_n;
use svgp::{EigenSpectrum, Error, TruncationPolicy};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numeric { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Unsupported(_) => PyNotImplementedError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a square matrix"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Fourier-series covariance kernel on `[-pi, pi]`.
#[pyclass(name = "SpectralKernel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKernel {
    inner: svgp::SpectralKernel,
}

#[pymethods]
impl PyKernel {
    /// `lambda_j = j^(-1-2 alpha/d)`.
    #[staticmethod]
    #[pyo3(signature = (alpha, d=1, tail_tol=1e-8, max_terms=2048))]
    fn polynomial(alpha: f64, d: u32, tail_tol: f64, max_terms: usize) -> PyResult<Self> {
        let s = EigenSpectrum::polynomial(alpha, d).map_err(to_py)?;
        let inner = svgp::SpectralKernel::new(s, TruncationPolicy { tail_tol, max_terms }).map_err(to_py)?;
        Ok(PyKernel { inner })
    }

    /// `lambda_j = tau exp(-tau j / 4)`.
    #[staticmethod]
    #[pyo3(signature = (tau, tail_tol=1e-8, max_terms=2048))]
    fn exponential(tau: f64, tail_tol: f64, max_terms: usize) -> PyResult<Self> {
        let s = EigenSpectrum::exponential_experiment(tau).map_err(to_py)?;
        let inner = svgp::SpectralKernel::new(s, TruncationPolicy { tail_tol, max_terms }).map_err(to_py)?;
        Ok(PyKernel { inner })
    }

    /// Kernel with an explicit number of terms.
    #[staticmethod]
    fn polynomial_truncated(alpha: f64, terms: usize) -> PyResult<Self> {
        let s = EigenSpectrum::polynomial(alpha, 1).map_err(to_py)?;
        let inner = svgp::SpectralKernel::with_truncation(s, terms).map_err(to_py)?;
        Ok(PyKernel { inner })
    }

    #[getter]
    fn truncation(&self) -> usize {
        self.inner.truncation()
    }

    #[getter]
    fn trace(&self) -> f64 {
        self.inner.trace()
    }

    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    fn __call__(&self, x: f64, y: f64) -> PyResult<f64> {
        self.inner.kernel_eval(x, y).map_err(to_py)
    }

    fn gram(&self, xs: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(matrix_to_rows(&self.inner.gram_sym(&xs).map_err(to_py)?))
    }

    fn __repr__(&self) -> String {
        format!("SpectralKernel({:?}, truncation={})", self.inner.spectrum(), self.inner.truncation())
    }
}

/// Regression function given by its Fourier coefficients.
#[pyclass(name = "TrueFunction", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTruth {
    inner: Arc<svgp::TrueFunction>,
}

fn truth(r: svgp::Result<svgp::TrueFunction>) -> PyResult<PyTruth> {
    Ok(PyTruth { inner: Arc::new(r.map_err(to_py)?) })
}

#[pymethods]
impl PyTruth {
    #[staticmethod]
    #[pyo3(signature = (beta, terms=10_000))]
    fn lacunary_series(beta: f64, terms: usize) -> PyResult<Self> {
        truth(svgp::TrueFunction::lacunary_series(beta, terms))
    }

    #[staticmethod]
    #[pyo3(signature = (exponent, terms=10_000))]
    fn power_law(exponent: f64, terms: usize) -> PyResult<Self> {
        truth(svgp::TrueFunction::power_law(exponent, terms))
    }

    #[staticmethod]
    #[pyo3(signature = (p, r, beta, d=1, terms=10_000))]
    fn lower_bound(p: f64, r: f64, beta: f64, d: u32, terms: usize) -> PyResult<Self> {
        truth(svgp::TrueFunction::lower_bound(p, r, beta, d, terms))
    }

    #[staticmethod]
    #[pyo3(signature = (q, alpha, beta, d=1, terms=10_000))]
    fn oversmooth(q: f64, alpha: f64, beta: f64, d: u32, terms: usize) -> PyResult<Self> {
        truth(svgp::TrueFunction::oversmooth(q, alpha, beta, d, terms))
    }

    #[staticmethod]
    fn from_coefficients(coefficients: Vec<f64>) -> Self {
        PyTruth { inner: Arc::new(svgp::TrueFunction::from_coefficients(coefficients)) }
    }

    #[staticmethod]
    fn zero() -> Self {
        PyTruth { inner: Arc::new(svgp::TrueFunction::zero()) }
    }

    fn __call__(&self, xs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.eval_many(&xs).map_err(to_py)
    }

    fn l2_norm(&self) -> f64 {
        self.inner.l2_norm()
    }
}

#[pyclass(name = "Dataset", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: svgp::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(x: Vec<f64>, y: Vec<f64>, sigma: f64) -> PyResult<Self> {
        Ok(PyDataset { inner: svgp::Dataset::new(x, y, sigma).map_err(to_py)? })
    }

    /// Uniform design on `[-pi, pi]` with Gaussian noise around `truth`.
    #[staticmethod]
    fn sample(truth: &PyTruth, n: usize, sigma: f64, seed: u64) -> PyResult<Self> {
        Ok(PyDataset { inner: svgp::sample_dataset(&truth.inner, n, sigma, seed).map_err(to_py)? })
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x.clone()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Variational posterior for one inducing strategy.
#[pyclass(name = "VariationalPosterior", frozen, skip_from_py_object)]
struct PyPosterior {
    inner: svgp::VariationalPosterior,
}

#[pymethods]
impl PyPosterior {
    /// `strategy` is one of population_spectral, sample_spectral,
    /// equidistant_points, m_dpp; `seed` drives the m-DPP draw.
    #[staticmethod]
    #[pyo3(signature = (kernel, data, strategy, m, seed=0))]
    fn fit(kernel: &PyKernel, data: &PyDataset, strategy: &str, m: usize, seed: u64) -> PyResult<Self> {
        let kind: StrategyKind = strategy.parse().map_err(to_py)?;
        let blocks = build_blocks(kind, &kernel.inner, &data.inner, m, None, seed).map_err(to_py)?;
        let inner = svgp::fit_variational(&kernel.inner, &data.inner, blocks).map_err(to_py)?;
        Ok(PyPosterior { inner })
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    /// `(mean, variance)` lists.
    fn predict(&self, xs: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let p = self.inner.predict_many(&xs).map_err(to_py)?;
        Ok((p.mean, p.variance))
    }

    fn predict_general(&self, xs: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let p = self.inner.predict_general_many(&xs).map_err(to_py)?;
        Ok((p.mean, p.variance))
    }

    fn predict_spectral(&self, xs: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let p = self.inner.predict_spectral_many(&xs).map_err(to_py)?;
        Ok((p.mean, p.variance))
    }

    fn mean_weights(&self) -> Vec<f64> {
        self.inner.mean_weights().iter().copied().collect()
    }

    fn inducing_points(&self) -> Option<Vec<f64>> {
        self.inner.blocks().points().map(|p| p.to_vec())
    }

    fn elbo(&self) -> PyResult<f64> {
        self.inner.elbo().map_err(to_py)
    }

    /// Posterior mean of the squared L2 distance to the posterior mean.
    fn spread(&self) -> PyResult<f64> {
        self.inner.posterior_l2_spread().map_err(to_py)
    }

    #[pyo3(signature = (gamma=0.05, mc_samples=100_000, seed=0))]
    fn radius(&self, gamma: f64, mc_samples: usize, seed: u64) -> PyResult<f64> {
        Ok(radius(&self.inner, gamma, mc_samples, seed).map_err(to_py)?.radius)
    }

    fn l2_distance(&self, truth: &PyTruth) -> PyResult<f64> {
        svgp::credible::l2_distance_to_truth(&self.inner, &truth.inner).map_err(to_py)
    }

    /// `(distance, radius)` for a credible-ball coverage check.
    #[pyo3(signature = (truth, gamma=0.05, mc_samples=100_000, seed=0))]
    fn coverage(&self, truth: &PyTruth, gamma: f64, mc_samples: usize, seed: u64) -> PyResult<(f64, f64)> {
        let c = coverage(&self.inner, &truth.inner, gamma, mc_samples, seed).map_err(to_py)?;
        Ok((c.distance, c.ball.radius))
    }
}

#[pyclass(name = "ExactPosterior", frozen, skip_from_py_object)]
struct PyExact {
    inner: svgp::ExactPosterior,
}

#[pymethods]
impl PyExact {
    #[staticmethod]
    fn fit(kernel: &PyKernel, data: &PyDataset) -> PyResult<Self> {
        Ok(PyExact { inner: svgp::fit_exact(&kernel.inner, &data.inner).map_err(to_py)? })
    }

    fn predict(&self, xs: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let p = self.inner.predict_many(&xs).map_err(to_py)?;
        Ok((p.mean, p.variance))
    }

    fn log_marginal_likelihood(&self) -> f64 {
        self.inner.log_marginal_likelihood()
    }
}

/// Bias, variance and spread terms as a dict.
#[pyfunction]
fn rate_terms<'py>(
    py: Python<'py>,
    kernel: &PyKernel,
    truth: &PyTruth,
    n: usize,
    m: usize,
    sigma2: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let t = svgp::rate_terms(&kernel.inner, &truth.inner, n, m, sigma2).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("n", t.n)?;
    d.set_item("m", t.m)?;
    d.set_item("b_n", t.b_n)?;
    d.set_item("w_n", t.w_n)?;
    d.set_item("v_n", t.v_n)?;
    d.set_item("r_n", t.r_n)?;
    d.set_item("j_n", t.j_n)?;
    Ok(d)
}

/// Largest `j` with `n lambda_j >= 1`.
#[pyfunction]
fn effective_dim(kernel: &PyKernel, n: usize) -> usize {
    svgp::effective_dim(kernel.inner.spectrum(), n)
}

#[pyfunction]
#[pyo3(signature = (n, alpha, d=1))]
fn rescaling_tau(n: u64, alpha: f64, d: u32) -> PyResult<f64> {
    tau_n(n, alpha, d).map_err(to_py)
}

/// Sorted indices of an m-DPP draw with kernel matrix `l`.
#[pyfunction]
fn mdpp_sample(l: Vec<Vec<f64>>, m: usize, seed: u64) -> PyResult<Vec<usize>> {
    svgp::inducing::mdpp_sample(&matrix_from_rows(l)?, m, seed).map_err(to_py)
}

/// Runs the command-line front end; returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("svgp".to_string()).chain(args);
    svgp::cli::run(argv, &mut std::io::stdout())
}

#[pymodule]
pub fn svgp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyTruth>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPosterior>()?;
    m.add_class::<PyExact>()?;
    m.add_function(wrap_pyfunction!(rate_terms, m)?)?;
    m.add_function(wrap_pyfunction!(effective_dim, m)?)?;
    m.add_function(wrap_pyfunction!(rescaling_tau, m)?)?;
    m.add_function(wrap_pyfunction!(mdpp_sample, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
