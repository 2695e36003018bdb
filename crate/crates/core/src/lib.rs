//! Sparse variational Gaussian-process regression on `[-π, π]` with Mercer
//! (Fourier-series) priors, four inducing-variable strategies, and a
//! frequentist validation harness for credible balls and contraction rates.

pub mod cli;
pub mod credible;
pub mod error;
pub mod experiments;
pub mod inducing;
pub mod krr_oracle;
pub mod linalg;
pub mod posterior;
pub mod spectral_kernel;
pub mod synthetic_data;
pub mod theory;

pub use error::{Error, Result};
pub use inducing::{InducingBlocks, StrategyKind};
pub use posterior::{fit_exact, fit_variational, ExactPosterior, VariationalPosterior};
pub use spectral_kernel::{EigenSpectrum, FourierBasis, SpectralKernel, TruncationPolicy};
pub use synthetic_data::{sample_dataset, Dataset, TrueFunction};
pub use theory::{effective_dim, rate_terms, RateTerms};
