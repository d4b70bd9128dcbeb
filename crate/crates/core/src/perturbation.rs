//! Random-weight perturbation estimation. Each record's loss term is scaled by
//! ψᵢ = μᵢνᵢ with μᵢ ~ Bernoulli(q) and νᵢ ≥ 0 of mean 1/q, the weighted
//! corrected normal equations are solved, and m independent replicates are
//! averaged.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, Exp, Geometric};
use rayon::prelude::*;

use crate::eiv::{check_len, corrected_hessian, solve_corrected, CoefficientEstimate, Dataset, ErrorCovariance, EstimateKind};
use crate::error::{EivError, Result};
use crate::linalg::{factor_checked, symmetrize, weighted_moments, Rows, SingularPolicy};
use crate::rng::Seed;

/// Maximum redraws of a replicate whose perturbed Gram matrix is singular.
pub const MAX_RETRIES: u64 = 3;

/// Distribution of the positive factor ν, parameterized by the inclusion rate q.
/// Implementations must have mean 1/q.
pub trait WeightLaw: Sync {
    fn sample(&self, q: f64, rng: &mut dyn RngCore) -> f64;
    /// Variance b² of ν at rate q.
    fn variance(&self, q: f64) -> f64;
}

/// ν ~ Exponential with mean 1/q, so b² = 1/q².
#[derive(Debug, Clone, Copy, Default)]
pub struct Exponential;

impl WeightLaw for Exponential {
    fn sample(&self, q: f64, rng: &mut dyn RngCore) -> f64 {
        Exp::new(q).expect("rate checked positive").sample(rng)
    }

    fn variance(&self, q: f64) -> f64 {
        1.0 / (q * q)
    }
}

/// ν ≡ 1/q (b² = 0): plain Bernoulli thinning.
#[derive(Debug, Clone, Copy, Default)]
pub struct Constant;

impl WeightLaw for Constant {
    fn sample(&self, q: f64, _rng: &mut dyn RngCore) -> f64 {
        1.0 / q
    }

    fn variance(&self, _q: f64) -> f64 {
        0.0
    }
}

/// One draw of ψ, stored sparsely over its nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationWeights {
    n: usize,
    support: Vec<usize>,
    values: Vec<f64>,
    q: f64,
    b2: f64,
}

impl PerturbationWeights {
    /// Builds weights from a dense ψ (test and replay use).
    pub fn from_dense(psi: &[f64], q: f64, b2: f64) -> Result<Self> {
        check_q(q)?;
        if psi.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(EivError::InvalidInput("weights must be finite and non-negative".into()));
        }
        let (support, values) = psi
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Ok(PerturbationWeights {
            n: psi.len(),
            support,
            values,
            q,
            b2,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    /// a = 1 − q + b²q².
    pub fn a(&self) -> f64 {
        1.0 - self.q + self.b2 * self.q * self.q
    }

    /// Indices of records with ψᵢ > 0, ascending.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// ψ on [`support`](Self::support).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nonzero(&self) -> usize {
        self.support.len()
    }

    pub fn psi(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.n];
        for (&i, &v) in self.support.iter().zip(&self.values) {
            dense[i] = v;
        }
        dense
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(EivError::InvalidParameter {
            name: "q",
            reason: format!("inclusion rate must lie in (0, 1], got {q}"),
        })
    }
}

/// ψᵢ = μᵢνᵢ with exponential ν of mean 1/q.
pub fn generate_weights(n: usize, q: f64, seed: Seed) -> Result<PerturbationWeights> {
    generate_weights_with(n, q, seed, &Exponential)
}

/// Bernoulli gates are produced by skipping geometric gaps, so the cost is
/// proportional to the number of nonzero weights rather than to n.
pub fn generate_weights_with(n: usize, q: f64, seed: Seed, law: &dyn WeightLaw) -> Result<PerturbationWeights> {
    check_q(q)?;
    let mut rng = seed.rng();
    let gaps = Geometric::new(q).map_err(|e| EivError::InvalidParameter {
        name: "q",
        reason: e.to_string(),
    })?;
    let expected = (q * n as f64).ceil() as usize;
    let mut support = Vec::with_capacity(expected + expected / 8 + 16);
    let mut values = Vec::with_capacity(support.capacity());
    let mut next: u64 = 0;
    loop {
        next = next.saturating_add(gaps.sample(&mut rng));
        if next >= n as u64 {
            break;
        }
        support.push(next as usize);
        values.push(law.sample(q, &mut rng));
        next += 1;
    }
    Ok(PerturbationWeights {
        n,
        support,
        values,
        q,
        b2: law.variance(q),
    })
}

fn perturbed_moments(data: &Dataset, weights: &PerturbationWeights) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_len("perturbation weights", data.n(), weights.n())?;
    if weights.nonzero() == 0 {
        return Err(EivError::DegeneratePlan("every perturbation weight is zero"));
    }
    Ok(weighted_moments(
        data.w(),
        data.y(),
        Rows::Subset(weights.support()),
        Some(weights.values()),
    ))
}

/// β̌ = [(1/n)ΣψᵢWᵢWᵢᵀ − Σuu]⁻¹ (1/n)ΣψᵢWᵢyᵢ, touching only rows with ψᵢ > 0.
pub fn perturbed_estimate(
    data: &Dataset,
    sigma: &ErrorCovariance,
    weights: &PerturbationWeights,
) -> Result<CoefficientEstimate> {
    perturbed_estimate_with(data, sigma, weights, SingularPolicy::Fail)
}

pub fn perturbed_estimate_with(
    data: &Dataset,
    sigma: &ErrorCovariance,
    weights: &PerturbationWeights,
    policy: SingularPolicy,
) -> Result<CoefficientEstimate> {
    sigma.check_dim(data.p())?;
    let (gram, cross) = perturbed_moments(data, weights)?;
    solve_corrected(
        &gram,
        &cross,
        data.n() as f64,
        1.0,
        sigma,
        "perturbed corrected Gram matrix",
        policy,
        EstimateKind::Perturbed,
    )
}

/// Gradient of the perturbed corrected loss,
/// `−(1/n) Σ ψᵢWᵢ(yᵢ − Wᵢᵀβ) − Σuu β`.
pub fn perturbed_score(
    data: &Dataset,
    sigma: &ErrorCovariance,
    weights: &PerturbationWeights,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    sigma.check_dim(data.p())?;
    check_len("coefficient vector", data.p(), beta.len())?;
    let (gram, cross) = perturbed_moments(data, weights)?;
    let n = data.n() as f64;
    Ok((gram * beta - cross) / n - sigma.matrix() * beta)
}

#[derive(Clone, Copy)]
pub struct ClepsOptions<'a> {
    pub law: &'a dyn WeightLaw,
    pub policy: SingularPolicy,
}

impl Default for ClepsOptions<'_> {
    fn default() -> Self {
        ClepsOptions {
            law: &Exponential,
            policy: SingularPolicy::Fail,
        }
    }
}

impl std::fmt::Debug for ClepsOptions<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClepsOptions").field("policy", &self.policy).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct ClepsResult {
    pub beta_mean: DVector<f64>,
    pub per_rep: Vec<DVector<f64>>,
    /// Between-replicate variance of the mean; `None` when m = 1.
    pub cov: Option<DMatrix<f64>>,
    pub m: usize,
    pub r: usize,
    pub q: f64,
    /// Realized number of nonzero weights in each replicate.
    pub nonzero_counts: Vec<usize>,
    /// Singular replicates that were redrawn.
    pub retries: usize,
}

impl ClepsResult {
    pub fn covariance(&self) -> Result<&DMatrix<f64>> {
        self.cov
            .as_ref()
            .ok_or(EivError::VarianceUnavailable("between-replicate variance needs m ≥ 2"))
    }
}

/// Averages m perturbed estimates with expected nonzero count r each.
/// Replicate k uses the sub-seed `seed.derive(k)`; singular replicates are
/// redrawn from `seed.derive2(k, attempt)` up to [`MAX_RETRIES`] times.
pub fn cleps_estimate(
    data: &Dataset,
    sigma: &ErrorCovariance,
    r: usize,
    m: usize,
    seed: Seed,
) -> Result<ClepsResult> {
    cleps_estimate_with(data, sigma, r, m, seed, ClepsOptions::default())
}

pub fn cleps_estimate_with(
    data: &Dataset,
    sigma: &ErrorCovariance,
    r: usize,
    m: usize,
    seed: Seed,
    options: ClepsOptions<'_>,
) -> Result<ClepsResult> {
    sigma.check_dim(data.p())?;
    let n = data.n();
    if m == 0 {
        return Err(EivError::InvalidParameter {
            name: "m",
            reason: "at least one replicate is required".into(),
        });
    }
    if r == 0 || r > n {
        return Err(EivError::InvalidParameter {
            name: "r",
            reason: format!("must lie in [1, {n}], got {r}"),
        });
    }
    if m * 10 >= r {
        log::warn!("m = {m} is not below r/10 = {}; replicate estimates may be unstable", r / 10);
    }
    let q = r as f64 / n as f64;

    let replicate = |k: usize| -> Result<(DVector<f64>, usize, usize)> {
        let mut last = None;
        for attempt in 0..=MAX_RETRIES {
            let sub = if attempt == 0 {
                seed.derive(k as u64)
            } else {
                seed.derive2(k as u64, attempt)
            };
            let weights = generate_weights_with(n, q, sub, options.law)?;
            match perturbed_estimate_with(data, sigma, &weights, options.policy) {
                Ok(est) => return Ok((est.beta, weights.nonzero(), attempt as usize)),
                Err(e @ (EivError::Singular { .. } | EivError::DegeneratePlan(_))) => {
                    log::debug!("replicate {k} attempt {attempt} failed: {e}");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    };

    let outcomes: Vec<_> = (0..m).into_par_iter().map(replicate).collect::<Result<_>>()?;
    let mut per_rep = Vec::with_capacity(m);
    let mut nonzero_counts = Vec::with_capacity(m);
    let mut retries = 0;
    for (beta, nz, tries) in outcomes {
        per_rep.push(beta);
        nonzero_counts.push(nz);
        retries += tries;
    }

    let p = data.p();
    let mut beta_mean = DVector::zeros(p);
    for b in &per_rep {
        beta_mean += b;
    }
    beta_mean /= m as f64;

    let cov = (m >= 2).then(|| {
        let mut acc = DMatrix::zeros(p, p);
        for b in &per_rep {
            let d = b - &beta_mean;
            acc += &d * d.transpose();
        }
        symmetrize(&acc) / (m * (m - 1)) as f64
    });

    Ok(ClepsResult {
        beta_mean,
        per_rep,
        cov,
        m,
        r,
        q,
        nonzero_counts,
        retries,
    })
}

/// Large-sample covariance of the m-fold average when mr < n:
/// `(a/(m r)) H_W⁻¹ Σ_c H_W⁻¹` with `Σ_c = (1/n) Σ WᵢWᵢᵀ(yᵢ − Wᵢᵀβ̂)²` and
/// `a = 1 − q + b²q²` for the given weight law.
pub fn cleps_asymptotic_covariance(
    data: &Dataset,
    beta_hat: &DVector<f64>,
    sigma: &ErrorCovariance,
    r: usize,
    m: usize,
    law: &dyn WeightLaw,
) -> Result<DMatrix<f64>> {
    if r == 0 || m == 0 {
        return Err(EivError::InvalidParameter {
            name: "r, m",
            reason: "must both be positive".into(),
        });
    }
    let n = data.n() as f64;
    let q = r as f64 / n;
    check_q(q)?;
    let a = 1.0 - q + law.variance(q) * q * q;
    let resid = data.residuals(beta_hat)?;
    let e2: Vec<f64> = resid.iter().map(|e| e * e).collect();
    let (meat, _) = weighted_moments(data.w(), data.y(), Rows::All, Some(&e2));
    let sigma_c = meat / n;
    let h = corrected_hessian(data, sigma)?;
    let system = factor_checked(&h, "corrected Hessian H_W", SingularPolicy::Fail)?;
    let left = system.lu.solve_matrix(&sigma_c);
    let sandwich = symmetrize(&system.lu.solve_matrix(&left.transpose()));
    Ok(sandwich * (a / (m as f64 * r as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eiv::full_corrected_estimate;
    use approx::assert_relative_eq;

    fn toy(n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = i as f64;
                vec![1.0, (t * 0.61).sin() * 1.5, (t * 0.23).cos() + 0.01 * t]
            })
            .collect();
        let y = rows
            .iter()
            .enumerate()
            .map(|(i, r)| 0.5 + r[1] - 0.7 * r[2] + (((i * 13) % 7) as f64 - 3.0) * 0.2)
            .collect();
        Dataset::from_rows(&rows, y).unwrap()
    }

    #[test]
    fn constant_law_at_q_one_is_all_ones() {
        let w = generate_weights_with(7, 1.0, Seed::new(1), &Constant).unwrap();
        assert_eq!(w.psi(), vec![1.0; 7]);
        assert_eq!(w.a(), 0.0);
    }

    #[test]
    fn exponential_law_has_a_equal_two_minus_q() {
        for q in [0.01, 0.1, 0.5, 1.0] {
            let w = generate_weights(10, q, Seed::new(2)).unwrap();
            assert_relative_eq!(w.b2(), 1.0 / (q * q), max_relative = 1e-15);
            assert_relative_eq!(w.a(), 2.0 - q, epsilon = 1e-15);
        }
    }

    #[test]
    fn psi_variance_is_n_a_over_r() {
        let n = 1000.0;
        for q in [0.01, 0.1, 0.5] {
            let w = generate_weights(10, q, Seed::new(2)).unwrap();
            let second_moment = q * (w.b2() + 1.0 / (q * q));
            assert_relative_eq!(second_moment - 1.0, n * w.a() / (q * n), max_relative = 1e-12);
        }
    }

    #[test]
    fn row_permutation_with_matching_weights_leaves_estimate_unchanged() {
        let data = toy(40);
        let sigma = ErrorCovariance::isotropic(3, 0.05).unwrap();
        let psi: Vec<f64> = (0..data.n()).map(|i| if i % 3 == 0 { 0.0 } else { 0.5 + i as f64 * 0.1 }).collect();
        let n = data.n();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let permuted = data.select(&perm).unwrap();
        let psi_perm: Vec<f64> = perm.iter().map(|&i| psi[i]).collect();
        let a = perturbed_estimate(&data, &sigma, &PerturbationWeights::from_dense(&psi, 0.5, 4.0).unwrap()).unwrap();
        let b = perturbed_estimate(&permuted, &sigma, &PerturbationWeights::from_dense(&psi_perm, 0.5, 4.0).unwrap())
            .unwrap();
        for (x, y) in a.beta.iter().zip(b.beta.iter()) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn invalid_rate_rejected() {
        assert!(generate_weights(10, 0.0, Seed::new(1)).is_err());
        assert!(generate_weights(10, 1.5, Seed::new(1)).is_err());
        assert!(generate_weights(10, f64::NAN, Seed::new(1)).is_err());
    }

    #[test]
    fn weights_are_reproducible_and_sparse() {
        let a = generate_weights(1000, 0.05, Seed::new(5)).unwrap();
        assert_eq!(a, generate_weights(1000, 0.05, Seed::new(5)).unwrap());
        assert!(a.support().windows(2).all(|w| w[0] < w[1]));
        assert!(a.values().iter().all(|&v| v > 0.0));
        let psi = a.psi();
        assert_eq!(psi.iter().filter(|&&v| v > 0.0).count(), a.nonzero());
    }

    #[test]
    fn unit_weights_give_full_estimate() {
        let data = toy(30);
        let sigma = ErrorCovariance::diagonal(&[0.0, 0.1, 0.05]).unwrap();
        let w = PerturbationWeights::from_dense(&[1.0; 30], 1.0, 0.0).unwrap();
        let got = perturbed_estimate(&data, &sigma, &w).unwrap();
        let want = full_corrected_estimate(&data, &sigma).unwrap();
        assert_relative_eq!(got.beta, want.beta, epsilon = 1e-12);
    }

    #[test]
    fn hand_case() {
        let data = Dataset::new(
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            DVector::from_vec(vec![3.0, 1.0]),
        )
        .unwrap();
        let w = PerturbationWeights::from_dense(&[2.0, 0.0], 0.5, 4.0).unwrap();
        let b = perturbed_estimate(&data, &ErrorCovariance::zero(1), &w).unwrap();
        assert_relative_eq!(b.beta[0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn all_zero_weights_rejected() {
        let data = toy(5);
        let w = PerturbationWeights::from_dense(&[0.0; 5], 0.5, 4.0).unwrap();
        assert!(perturbed_estimate(&data, &ErrorCovariance::zero(3), &w).is_err());
    }

    #[test]
    fn cleps_single_replicate() {
        let data = toy(400);
        let sigma = ErrorCovariance::diagonal(&[0.0, 0.05, 0.05]).unwrap();
        let res = cleps_estimate(&data, &sigma, 100, 1, Seed::new(3)).unwrap();
        let w = generate_weights(400, 0.25, Seed::new(3).derive(0)).unwrap();
        let single = perturbed_estimate(&data, &sigma, &w).unwrap();
        assert_eq!(res.beta_mean, single.beta);
        assert!(res.cov.is_none());
        assert!(matches!(res.covariance(), Err(EivError::VarianceUnavailable(_))));
    }

    #[test]
    fn cleps_mean_and_covariance() {
        let data = toy(2000);
        let sigma = ErrorCovariance::diagonal(&[0.0, 0.05, 0.05]).unwrap();
        let res = cleps_estimate(&data, &sigma, 400, 8, Seed::new(11)).unwrap();
        let mut mean = DVector::zeros(3);
        for b in &res.per_rep {
            mean += b;
        }
        mean /= 8.0;
        assert_relative_eq!(res.beta_mean, mean, epsilon = 1e-14);
        let cov = res.covariance().unwrap();
        assert_relative_eq!(cov.clone(), cov.transpose(), epsilon = 0.0);
        assert!(cov.clone().symmetric_eigen().eigenvalues.iter().all(|&v| v >= -1e-18));
        assert_eq!(res.nonzero_counts.len(), 8);
        assert_eq!(res.q, 0.2);
    }

    #[test]
    fn cleps_rejects_bad_sizes() {
        let data = toy(50);
        let sigma = ErrorCovariance::zero(3);
        assert!(cleps_estimate(&data, &sigma, 0, 2, Seed::new(1)).is_err());
        assert!(cleps_estimate(&data, &sigma, 51, 2, Seed::new(1)).is_err());
        assert!(cleps_estimate(&data, &sigma, 10, 0, Seed::new(1)).is_err());
    }
}
