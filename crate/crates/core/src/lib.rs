//! Corrected-likelihood estimation and subsampling for linear regression with
//! covariate measurement error.
//!
//! * [`eiv`]: corrected loss, closed-form full-data estimator, replicate-based
//!   `Σuu` estimation and the full-data asymptotic covariance.
//! * [`sampling`]: uniform, leverage, A-/L-optimal and IBOSS designs.
//! * [`subsample`]: inverse-probability-weighted corrected estimation, the
//!   two-step optimal subsampling estimator and its plug-in covariance.
//! * [`perturbation`]: random-weight (Bernoulli × exponential) perturbation
//!   estimator averaged over replicates.
//! * [`simgen`], [`ingest`]: synthetic and CSV data.
//! * [`bench`]: Monte Carlo and timing harness.

pub mod bench;
pub mod eiv;
pub mod error;
pub mod ingest;
pub mod linalg;
pub mod rng;
pub mod perturbation;
pub mod sampling;
pub mod simgen;
pub mod subsample;

pub use eiv::{CoefficientEstimate, Dataset, ErrorCovariance, ReplicatedDataset};
pub use error::{EivError, Result};
pub use rng::Seed;
