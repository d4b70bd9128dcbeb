//! Corrected-likelihood estimation for the linear model `y = Xβ + ε`, observed
//! through `W = X + U` with `Cov(U) = Σuu`.
//!
//! The naive least-squares loss is biased because `Cov(W, y − Wᵀβ) = −Σuu β`.
//! The corrected loss
//!
//! ```text
//! ℓ(β) = (1/2n) Σ (yᵢ − Wᵢᵀβ)² − ½ βᵀ Σuu β
//! ```
//!
//! has the error-free loss as its expectation over `U`, and its minimizer has
//! the closed form `(Σ WᵢWᵢᵀ − nΣuu)⁻¹ Σ Wᵢyᵢ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{EivError, Result};
use crate::linalg::{self, factor_checked, pairwise_sum, Rows, SingularPolicy};

/// Observed covariates `W` (n × p) and responses `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    w: DMatrix<f64>,
    y: DVector<f64>,
}

impl Dataset {
    pub fn new(w: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (n, p) = w.shape();
        if n == 0 {
            return Err(EivError::EmptyDataset);
        }
        if p == 0 {
            return Err(EivError::InvalidInput("design has no columns".into()));
        }
        if y.len() != n {
            return Err(EivError::DimensionMismatch {
                context: "response length vs design rows",
                expected: n,
                found: y.len(),
            });
        }
        if n < p {
            return Err(EivError::InvalidInput(format!(
                "need at least as many records as covariates (n = {n}, p = {p})"
            )));
        }
        if w.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(EivError::InvalidInput("dataset contains NaN or infinite values".into()));
        }
        Ok(Dataset { w, y })
    }

    /// Builds a dataset from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(EivError::DimensionMismatch {
                context: "row length",
                expected: p,
                found: bad.len(),
            });
        }
        let w = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Dataset::new(w, DVector::from_vec(y))
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.w, self.y)
    }

    /// `y − Wβ`.
    pub fn residuals(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("coefficient vector", self.p(), beta.len())?;
        Ok(&self.y - &self.w * beta)
    }

    /// The records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.n();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(EivError::Size {
                requested: bad + 1,
                available: n,
            });
        }
        let w = DMatrix::from_fn(indices.len(), self.p(), |k, j| self.w[(indices[k], j)]);
        let y = DVector::from_fn(indices.len(), |k, _| self.y[indices[k]]);
        Dataset::new(w, y)
    }

    /// `(Σ WᵢWᵢᵀ, Σ Wᵢyᵢ)` accumulated by cascade summation.
    pub fn moments(&self) -> (DMatrix<f64>, DVector<f64>) {
        linalg::weighted_moments(&self.w, &self.y, Rows::All, None)
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(EivError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

/// Where a measurement-error covariance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceSource {
    Known,
    EstimatedFromReplicates,
    Zero,
}

/// The p × p measurement-error covariance `Σuu`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCovariance {
    sigma_uu: DMatrix<f64>,
    source: CovarianceSource,
}

impl ErrorCovariance {
    /// Validates symmetry (relative 1e-12) and positive semidefiniteness
    /// (smallest eigenvalue ≥ −1e-10 · trace).
    pub fn new(sigma_uu: DMatrix<f64>, source: CovarianceSource) -> Result<Self> {
        let p = sigma_uu.nrows();
        if p != sigma_uu.ncols() {
            return Err(EivError::DimensionMismatch {
                context: "error covariance must be square",
                expected: p,
                found: sigma_uu.ncols(),
            });
        }
        if sigma_uu.iter().any(|v| !v.is_finite()) {
            return Err(EivError::InvalidInput("error covariance has non-finite entries".into()));
        }
        let scale = sigma_uu.amax().max(f64::MIN_POSITIVE);
        for i in 0..p {
            for j in (i + 1)..p {
                if (sigma_uu[(i, j)] - sigma_uu[(j, i)]).abs() > 1e-12 * scale {
                    return Err(EivError::InvalidInput(format!(
                        "error covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let trace = sigma_uu.trace();
        let min_eig = SymmetricEigen::new(linalg::symmetrize(&sigma_uu))
            .eigenvalues
            .min();
        if min_eig < -1e-10 * trace.abs().max(f64::MIN_POSITIVE) {
            return Err(EivError::InvalidInput(format!(
                "error covariance is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(ErrorCovariance { sigma_uu, source })
    }

    pub fn known(sigma_uu: DMatrix<f64>) -> Result<Self> {
        ErrorCovariance::new(sigma_uu, CovarianceSource::Known)
    }

    pub fn zero(p: usize) -> Self {
        ErrorCovariance {
            sigma_uu: DMatrix::zeros(p, p),
            source: CovarianceSource::Zero,
        }
    }

    /// `σu² I`.
    pub fn isotropic(p: usize, sigma_u2: f64) -> Result<Self> {
        if !(sigma_u2 >= 0.0) || !sigma_u2.is_finite() {
            return Err(EivError::InvalidParameter {
                name: "sigma_u2",
                reason: format!("must be finite and non-negative, got {sigma_u2}"),
            });
        }
        if sigma_u2 == 0.0 {
            return Ok(ErrorCovariance::zero(p));
        }
        Ok(ErrorCovariance {
            sigma_uu: DMatrix::identity(p, p) * sigma_u2,
            source: CovarianceSource::Known,
        })
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        ErrorCovariance::known(DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma_uu
    }

    pub fn source(&self) -> CovarianceSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.sigma_uu.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_uu.iter().all(|&v| v == 0.0)
    }

    /// `factor · Σuu`, keeping the provenance tag.
    pub fn scaled(&self, factor: f64) -> ErrorCovariance {
        ErrorCovariance {
            sigma_uu: &self.sigma_uu * factor,
            source: self.source,
        }
    }

    pub(crate) fn check_dim(&self, p: usize) -> Result<()> {
        check_len("error covariance dimension", p, self.dim())
    }
}

/// Per-record replicate measurements `W_{i,1..Jᵢ}` and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicatedDataset {
    p: usize,
    values: Vec<f64>,
    offsets: Vec<usize>,
    y: DVector<f64>,
}

impl ReplicatedDataset {
    /// `replicates[i]` holds the Jᵢ ≥ 1 covariate vectors of record i.
    pub fn new(replicates: Vec<Vec<Vec<f64>>>, y: Vec<f64>) -> Result<Self> {
        if replicates.is_empty() {
            return Err(EivError::EmptyDataset);
        }
        check_len("responses vs replicated records", replicates.len(), y.len())?;
        let p = replicates[0].first().map_or(0, Vec::len);
        if p == 0 {
            return Err(EivError::InvalidInput("replicate vectors are empty".into()));
        }
        let mut values = Vec::new();
        let mut offsets = vec![0];
        for (i, record) in replicates.iter().enumerate() {
            if record.is_empty() {
                return Err(EivError::InvalidInput(format!("record {i} has no replicates")));
            }
            for rep in record {
                check_len("replicate vector length", p, rep.len())?;
                values.extend_from_slice(rep);
            }
            offsets.push(offsets.last().copied().unwrap_or(0) + record.len());
        }
        if values.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(EivError::InvalidInput("replicates contain NaN or infinite values".into()));
        }
        Ok(ReplicatedDataset {
            p,
            values,
            offsets,
            y: DVector::from_vec(y),
        })
    }

    /// One replicate per record.
    pub fn from_dataset(data: &Dataset) -> Self {
        let (n, p) = (data.n(), data.p());
        let mut values = Vec::with_capacity(n * p);
        for i in 0..n {
            values.extend(data.w().row(i).iter());
        }
        ReplicatedDataset {
            p,
            values,
            offsets: (0..=n).collect(),
            y: data.y().clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Jᵢ.
    pub fn replicate_count(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn replicates(&self, i: usize) -> impl Iterator<Item = &[f64]> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.values[a * self.p..b * self.p].chunks_exact(self.p)
    }

    /// `Σᵢ (Jᵢ − 1)`.
    pub fn degrees_of_freedom(&self) -> usize {
        (0..self.n()).map(|i| self.replicate_count(i) - 1).sum()
    }

    /// The common Jᵢ if every record has the same replicate count.
    pub fn common_replication(&self) -> Option<usize> {
        let j = self.replicate_count(0);
        (1..self.n()).all(|i| self.replicate_count(i) == j).then_some(j)
    }

    /// Record mean W̄ᵢ.
    pub fn mean(&self, i: usize) -> Vec<f64> {
        let j = self.replicate_count(i) as f64;
        let mut m = vec![0.0; self.p];
        for rep in self.replicates(i) {
            for (acc, v) in m.iter_mut().zip(rep) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= j);
        m
    }

    /// Dataset of record means W̄ᵢ.
    pub fn means(&self) -> Result<Dataset> {
        let rows: Vec<Vec<f64>> = (0..self.n()).map(|i| self.mean(i)).collect();
        Dataset::from_rows(&rows, self.y.as_slice().to_vec())
    }

    /// Dataset built from the first replicate of each record (what a method that
    /// ignores replication would see).
    pub fn first_replicate(&self) -> Result<Dataset> {
        let rows: Vec<Vec<f64>> = (0..self.n())
            .map(|i| self.replicates(i).next().expect("Jᵢ ≥ 1").to_vec())
            .collect();
        Dataset::from_rows(&rows, self.y.as_slice().to_vec())
    }

    /// Record-mean design with its effective error covariance `Σuu / J`, valid
    /// when every record has the same replicate count `J`.
    pub fn averaged_design(&self, sigma: &ErrorCovariance) -> Result<(Dataset, ErrorCovariance)> {
        sigma.check_dim(self.p)?;
        let j = self.common_replication().ok_or_else(|| {
            EivError::InvalidInput("records have unequal replicate counts".into())
        })?;
        Ok((self.means()?, sigma.scaled(1.0 / j as f64)))
    }
}

/// Which estimator produced a coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateKind {
    FullCorrected,
    Ols,
    ReplicateAveraged,
    WeightedSubsample,
    TwoStep,
    Subdata,
    Perturbed,
    PerturbedAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientEstimate {
    pub beta: DVector<f64>,
    pub method: EstimateKind,
    /// Reciprocal 1-norm condition estimate of the solved matrix.
    pub solve_condition: f64,
}

/// Solves `(gram/n − scale·Σuu) β = cross/n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_corrected(
    gram: &DMatrix<f64>,
    cross: &DVector<f64>,
    n: f64,
    correction_scale: f64,
    sigma: &ErrorCovariance,
    label: &'static str,
    policy: SingularPolicy,
    method: EstimateKind,
) -> Result<CoefficientEstimate> {
    let mut matrix = gram / n;
    if correction_scale != 0.0 && !sigma.is_zero() {
        matrix -= sigma.matrix() * correction_scale;
    }
    let rhs = cross / n;
    let system = factor_checked(&matrix, label, policy)?;
    let beta = system.lu.solve(&rhs);
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(EivError::Singular {
            matrix: label,
            rcond: system.rcond,
        });
    }
    Ok(CoefficientEstimate {
        beta,
        method,
        solve_condition: system.rcond,
    })
}

/// ℓ(β) = (1/2n) Σ (yᵢ − Wᵢᵀβ)² − ½ βᵀΣuuβ.
pub fn corrected_loss(beta: &DVector<f64>, data: &Dataset, sigma: &ErrorCovariance) -> Result<f64> {
    sigma.check_dim(data.p())?;
    let resid = data.residuals(beta)?;
    let squares: Vec<f64> = resid.iter().map(|e| e * e).collect();
    let quad = beta.dot(&(sigma.matrix() * beta));
    Ok(pairwise_sum(&squares) / (2.0 * data.n() as f64) - 0.5 * quad)
}

/// ∇ℓ(β) = −(1/n) Σ Wᵢ(yᵢ − Wᵢᵀβ) − Σuu β.
pub fn corrected_gradient(
    beta: &DVector<f64>,
    data: &Dataset,
    sigma: &ErrorCovariance,
) -> Result<DVector<f64>> {
    sigma.check_dim(data.p())?;
    let resid = data.residuals(beta)?;
    let score = data.w().tr_mul(&resid) / data.n() as f64;
    Ok(-score - sigma.matrix() * beta)
}

/// β̂ = (Σ WᵢWᵢᵀ − nΣuu)⁻¹ Σ Wᵢyᵢ.
pub fn full_corrected_estimate(data: &Dataset, sigma: &ErrorCovariance) -> Result<CoefficientEstimate> {
    full_corrected_estimate_with(data, sigma, SingularPolicy::Fail)
}

pub fn full_corrected_estimate_with(
    data: &Dataset,
    sigma: &ErrorCovariance,
    policy: SingularPolicy,
) -> Result<CoefficientEstimate> {
    sigma.check_dim(data.p())?;
    let (gram, cross) = data.moments();
    solve_corrected(
        &gram,
        &cross,
        data.n() as f64,
        1.0,
        sigma,
        "corrected Gram matrix ΣWWᵀ − nΣuu",
        policy,
        EstimateKind::FullCorrected,
    )
}

/// Ordinary least squares on the observed covariates.
pub fn ols_estimate(data: &Dataset) -> Result<CoefficientEstimate> {
    let (gram, cross) = data.moments();
    let zero = ErrorCovariance::zero(data.p());
    solve_corrected(
        &gram,
        &cross,
        data.n() as f64,
        0.0,
        &zero,
        "Gram matrix WᵀW",
        SingularPolicy::Fail,
        EstimateKind::Ols,
    )
}

/// `H_W = (1/n) Σ WᵢWᵢᵀ − Σuu`.
pub fn corrected_hessian(data: &Dataset, sigma: &ErrorCovariance) -> Result<DMatrix<f64>> {
    sigma.check_dim(data.p())?;
    let (gram, _) = data.moments();
    Ok(gram / data.n() as f64 - sigma.matrix())
}

/// Σ̂uu = Σᵢ Σⱼ (W_{i,j} − W̄ᵢ)(W_{i,j} − W̄ᵢ)ᵀ / Σᵢ (Jᵢ − 1).
pub fn estimate_sigma_uu(rep: &ReplicatedDataset) -> Result<ErrorCovariance> {
    let dof = rep.degrees_of_freedom();
    if dof == 0 {
        return Err(EivError::InsufficientReplication);
    }
    let p = rep.p();
    let total: usize = (0..rep.n()).map(|i| rep.replicate_count(i)).sum();
    let mut deviations = DMatrix::zeros(total, p);
    let mut row = 0;
    for i in 0..rep.n() {
        if rep.replicate_count(i) < 2 {
            row += 1;
            continue;
        }
        let mean = rep.mean(i);
        for w in rep.replicates(i) {
            for j in 0..p {
                deviations[(row, j)] = w[j] - mean[j];
            }
            row += 1;
        }
    }
    let zeros = DVector::zeros(total);
    let (scatter, _) = linalg::weighted_moments(&deviations, &zeros, Rows::All, None);
    let estimate = linalg::symmetrize(&(scatter / dof as f64));
    ErrorCovariance::new(estimate, CovarianceSource::EstimatedFromReplicates)
}

/// {Σᵢ (W̄ᵢW̄ᵢᵀ − Jᵢ⁻¹Σuu)}⁻¹ Σᵢ W̄ᵢyᵢ.
pub fn replicate_averaged_estimate(
    rep: &ReplicatedDataset,
    sigma: &ErrorCovariance,
) -> Result<CoefficientEstimate> {
    sigma.check_dim(rep.p())?;
    let means = rep.means()?;
    let (gram, cross) = means.moments();
    let n = rep.n() as f64;
    let inv_j: Vec<f64> = (0..rep.n())
        .map(|i| 1.0 / rep.replicate_count(i) as f64)
        .collect();
    let correction = pairwise_sum(&inv_j) / n;
    solve_corrected(
        &gram,
        &cross,
        n,
        correction,
        sigma,
        "replicate-averaged corrected Gram Σ(W̄W̄ᵀ − Σuu/J)",
        SingularPolicy::Fail,
        EstimateKind::ReplicateAveraged,
    )
}

/// `E[(UUᵀ − Σuu)β]^{⊗2}` for `U ~ N(0, Σuu)`. By Isserlis' theorem entry (a, b)
/// is `Σ_{c,d} β_c β_d (Σ_ac Σ_bd + Σ_ad Σ_bc) = 2 (Σβ)_a (Σβ)_b`.
pub fn gaussian_fourth_moment_term(sigma: &ErrorCovariance, beta: &DVector<f64>) -> DMatrix<f64> {
    let v = sigma.matrix() * beta;
    &v * v.transpose() * 2.0
}

/// σ̂² = mean((yᵢ − Wᵢᵀβ)²) − βᵀΣuuβ, floored at 1e-12.
pub fn noise_variance_plugin(
    data: &Dataset,
    beta: &DVector<f64>,
    sigma: &ErrorCovariance,
) -> Result<f64> {
    sigma.check_dim(data.p())?;
    let resid = data.residuals(beta)?;
    let squares: Vec<f64> = resid.iter().map(|e| e * e).collect();
    let raw = pairwise_sum(&squares) / data.n() as f64 - beta.dot(&(sigma.matrix() * beta));
    Ok(raw.max(1e-12))
}

/// Plug-in full-data covariance `(1/n) H⁻¹ΓH⁻¹`, with
/// `Γ = σ²H + H(βᵀΣuuβ) + E[(UUᵀ − Σuu)β]^{⊗2} + σ²Σuu` and `H` estimated by
/// `(1/n)ΣWWᵀ − Σuu`.
pub fn full_asymptotic_covariance(
    data: &Dataset,
    beta: &DVector<f64>,
    sigma: &ErrorCovariance,
    noise_var: f64,
) -> Result<DMatrix<f64>> {
    if !(noise_var > 0.0) {
        return Err(EivError::InvalidParameter {
            name: "noise_var",
            reason: format!("must be positive, got {noise_var}"),
        });
    }
    check_len("coefficient vector", data.p(), beta.len())?;
    let h = corrected_hessian(data, sigma)?;
    let quad = beta.dot(&(sigma.matrix() * beta));
    let gamma = &h * noise_var
        + &h * quad
        + gaussian_fourth_moment_term(sigma, beta)
        + sigma.matrix() * noise_var;
    let system = factor_checked(&h, "corrected Hessian H_W", SingularPolicy::Fail)?;
    let left = system.lu.solve_matrix(&gamma);
    let sandwich = system.lu.solve_matrix(&left.transpose());
    Ok(linalg::symmetrize(&sandwich) / data.n() as f64)
}
