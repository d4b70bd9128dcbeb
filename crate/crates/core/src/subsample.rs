//! With-replacement subsampling, the inverse-probability-weighted corrected
//! estimator, and the two-step (pilot + optimal) estimator with its plug-in
//! covariance.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::eiv::{check_len, corrected_hessian, solve_corrected, CoefficientEstimate, Dataset, ErrorCovariance, EstimateKind};
use crate::error::{EivError, Result};
use crate::linalg::{factor_checked, project_psd, symmetrize, weighted_moments, Rows, SingularPolicy};
use crate::rng::{stage, Seed};
use crate::sampling::{optimal_probs, uncorrected_variant, uniform_probs, Criterion, Design, SamplingPlan};

/// Draws from a probabilistic plan, with the probability of each drawn record.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSubsample {
    indices: Vec<usize>,
    probs_at_draw: Vec<f64>,
}

impl WeightedSubsample {
    pub fn new(indices: Vec<usize>, probs_at_draw: Vec<f64>) -> Result<Self> {
        check_len("draw probabilities", indices.len(), probs_at_draw.len())?;
        if probs_at_draw.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(EivError::InvalidInput(
                "draw probabilities must lie in (0, 1]".into(),
            ));
        }
        Ok(WeightedSubsample {
            indices,
            probs_at_draw,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn probs_at_draw(&self) -> &[f64] {
        &self.probs_at_draw
    }

    /// Number of draws.
    pub fn r(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Concatenates two sets of draws, each keeping its own draw probability.
    pub fn pooled(&self, other: &WeightedSubsample) -> WeightedSubsample {
        let mut indices = self.indices.clone();
        indices.extend_from_slice(&other.indices);
        let mut probs = self.probs_at_draw.clone();
        probs.extend_from_slice(&other.probs_at_draw);
        WeightedSubsample {
            indices,
            probs_at_draw: probs,
        }
    }

    /// Inverse-probability weights `1/(r πᵢ*)`.
    pub fn ipw(&self) -> Vec<f64> {
        let r = self.r() as f64;
        self.probs_at_draw.iter().map(|p| 1.0 / (r * p)).collect()
    }

    fn check_against(&self, n: usize) -> Result<()> {
        if self.is_empty() {
            return Err(EivError::EmptyDataset);
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= n) {
            return Err(EivError::Size {
                requested: bad + 1,
                available: n,
            });
        }
        Ok(())
    }
}

/// `r` independent categorical draws from a probabilistic plan.
pub fn draw_with_replacement<R: Rng + ?Sized>(
    plan: &SamplingPlan,
    r: usize,
    rng: &mut R,
) -> Result<WeightedSubsample> {
    let probs = plan.probs().ok_or(EivError::DegeneratePlan(
        "deterministic plans cannot be sampled with replacement",
    ))?;
    if r == 0 {
        return Ok(WeightedSubsample {
            indices: Vec::new(),
            probs_at_draw: Vec::new(),
        });
    }
    let indices: Vec<usize> = if plan.design() == Design::Uniform {
        let n = probs.len();
        (0..r).map(|_| rng.random_range(0..n)).collect()
    } else {
        let dist = WeightedIndex::new(probs)
            .map_err(|_| EivError::DegeneratePlan("probabilities cannot be sampled"))?;
        (0..r).map(|_| dist.sample(rng)).collect()
    };
    let probs_at_draw = indices.iter().map(|&i| probs[i]).collect();
    Ok(WeightedSubsample {
        indices,
        probs_at_draw,
    })
}

/// [`draw_with_replacement`] with a fresh generator from `seed`.
pub fn draw_seeded(plan: &SamplingPlan, r: usize, seed: Seed) -> Result<WeightedSubsample> {
    draw_with_replacement(plan, r, &mut seed.rng())
}

/// `((1/n) Σ (rπᵢ*)⁻¹ Wᵢ*Wᵢ*ᵀ, (1/n) Σ (rπᵢ*)⁻¹ Wᵢ*yᵢ*)`.
fn ipw_moments(sub: &WeightedSubsample, data: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    let weights = sub.ipw();
    let (gram, cross) = weighted_moments(data.w(), data.y(), Rows::Subset(sub.indices()), Some(&weights));
    let n = data.n() as f64;
    (gram / n, cross / n)
}

/// `H̃_W = (1/n) Σ (rπᵢ*)⁻¹ Wᵢ*Wᵢ*ᵀ − Σuu`.
pub fn weighted_hessian(sub: &WeightedSubsample, data: &Dataset, sigma: &ErrorCovariance) -> Result<DMatrix<f64>> {
    sigma.check_dim(data.p())?;
    sub.check_against(data.n())?;
    let (gram, _) = ipw_moments(sub, data);
    Ok(gram - sigma.matrix())
}

/// Gradient of the weighted corrected loss,
/// `−(1/n) Σ (rπᵢ*)⁻¹ Wᵢ*(yᵢ* − Wᵢ*ᵀβ) − Σuu β`.
pub fn weighted_score(
    sub: &WeightedSubsample,
    data: &Dataset,
    sigma: &ErrorCovariance,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    sigma.check_dim(data.p())?;
    sub.check_against(data.n())?;
    check_len("coefficient vector", data.p(), beta.len())?;
    let (gram, cross) = ipw_moments(sub, data);
    Ok(gram * beta - cross - sigma.matrix() * beta)
}

/// β̃ = [(1/n)Σ(rπᵢ*)⁻¹Wᵢ*Wᵢ*ᵀ − Σuu]⁻¹ (1/n)Σ(rπᵢ*)⁻¹Wᵢ*yᵢ*.
pub fn weighted_corrected_estimate(
    sub: &WeightedSubsample,
    data: &Dataset,
    sigma: &ErrorCovariance,
) -> Result<CoefficientEstimate> {
    weighted_corrected_estimate_with(sub, data, sigma, SingularPolicy::Fail)
}

pub fn weighted_corrected_estimate_with(
    sub: &WeightedSubsample,
    data: &Dataset,
    sigma: &ErrorCovariance,
    policy: SingularPolicy,
) -> Result<CoefficientEstimate> {
    sigma.check_dim(data.p())?;
    sub.check_against(data.n())?;
    let weights = sub.ipw();
    let (gram, cross) = weighted_moments(data.w(), data.y(), Rows::Subset(sub.indices()), Some(&weights));
    solve_corrected(
        &gram,
        &cross,
        data.n() as f64,
        1.0,
        sigma,
        "weighted corrected Gram matrix",
        policy,
        EstimateKind::WeightedSubsample,
    )
}

/// Draws `r` records from `plan` and returns the weighted corrected estimate.
pub fn subsample_estimate(
    data: &Dataset,
    sigma: &ErrorCovariance,
    plan: &SamplingPlan,
    r: usize,
    seed: Seed,
) -> Result<CoefficientEstimate> {
    let sub = draw_seeded(plan, r, seed)?;
    weighted_corrected_estimate(&sub, data, sigma)
}

/// Plug-in covariance `V̆ = H̆_W⁻¹ V̆_c H̆_W⁻¹` of a weighted subsample estimate,
/// with `R` the number of draws,
/// `H̆_W = (1/(nR)) Σ Wᵢ*Wᵢ*ᵀ/πᵢ* − Σuu` and
/// `V̆_c = (1/(R²n²)) Σ eᵢ*² Wᵢ*Wᵢ*ᵀ/πᵢ*² − (1/R)(Σuu β)(Σuu β)ᵀ`.
///
/// The result is projected onto the PSD cone; the flag reports whether any
/// eigenvalue had to be clipped.
pub fn plugin_covariance(
    pooled: &WeightedSubsample,
    beta: &DVector<f64>,
    data: &Dataset,
    sigma: &ErrorCovariance,
) -> Result<(DMatrix<f64>, bool)> {
    let raw = plugin_covariance_raw(pooled.indices(), pooled.probs_at_draw(), beta, data, sigma)?;
    Ok(project_psd(&raw))
}

/// Unprojected plug-in covariance for arbitrary positive (not necessarily
/// normalized) draw weights `πᵢ*`.
pub fn plugin_covariance_raw(
    indices: &[usize],
    probs_at_draw: &[f64],
    beta: &DVector<f64>,
    data: &Dataset,
    sigma: &ErrorCovariance,
) -> Result<DMatrix<f64>> {
    sigma.check_dim(data.p())?;
    check_len("coefficient vector", data.p(), beta.len())?;
    check_len("draw probabilities", indices.len(), probs_at_draw.len())?;
    let sub = WeightedSubsample {
        indices: indices.to_vec(),
        probs_at_draw: probs_at_draw.to_vec(),
    };
    sub.check_against(data.n())?;
    let n = data.n() as f64;
    let big_r = indices.len() as f64;

    let inv_pi: Vec<f64> = probs_at_draw.iter().map(|p| 1.0 / p).collect();
    let (gram, _) = weighted_moments(data.w(), data.y(), Rows::Subset(indices), Some(&inv_pi));
    let h = gram / (n * big_r) - sigma.matrix();

    let resid = data.residuals(beta)?;
    let meat_weights: Vec<f64> = indices
        .iter()
        .zip(probs_at_draw)
        .map(|(&i, p)| resid[i] * resid[i] / (p * p))
        .collect();
    let (meat, _) = weighted_moments(data.w(), data.y(), Rows::Subset(indices), Some(&meat_weights));
    let v = sigma.matrix() * beta;
    let vc = meat / (big_r * big_r * n * n) - (&v * v.transpose()) / big_r;

    let system = factor_checked(&h, "plug-in Hessian H̆_W", SingularPolicy::Fail)?;
    let left = system.lu.solve_matrix(&vc);
    let sandwich = system.lu.solve_matrix(&left.transpose());
    Ok(symmetrize(&sandwich))
}

/// Asymptotic conditional covariance `V = H_W⁻¹ V_c H_W⁻¹` of the weighted
/// estimator for a known plan, with
/// `V_c = (1/(r n²)) Σ eᵢ² WᵢWᵢᵀ/πᵢ − (1/r)(Σuu β̂)(Σuu β̂)ᵀ` and residuals at β̂.
pub fn subsample_asymptotic_covariance(
    data: &Dataset,
    beta_hat: &DVector<f64>,
    sigma: &ErrorCovariance,
    probs: &[f64],
    r: usize,
) -> Result<DMatrix<f64>> {
    check_len("probability vector", data.n(), probs.len())?;
    if r == 0 {
        return Err(EivError::InvalidParameter {
            name: "r",
            reason: "must be at least 1".into(),
        });
    }
    let resid = data.residuals(beta_hat)?;
    let mut weights = Vec::with_capacity(data.n());
    for (e, &p) in resid.iter().zip(probs) {
        let num = e * e;
        if num == 0.0 {
            weights.push(0.0);
        } else if p > 0.0 {
            weights.push(num / p);
        } else {
            return Err(EivError::InvalidInput(
                "a record with nonzero residual has zero sampling probability".into(),
            ));
        }
    }
    let (meat, _) = weighted_moments(data.w(), data.y(), Rows::All, Some(&weights));
    let n = data.n() as f64;
    let r = r as f64;
    let v = sigma.matrix() * beta_hat;
    let vc = meat / (r * n * n) - (&v * v.transpose()) / r;
    let h = corrected_hessian(data, sigma)?;
    let system = factor_checked(&h, "corrected Hessian H_W", SingularPolicy::Fail)?;
    let left = system.lu.solve_matrix(&vc);
    Ok(symmetrize(&system.lu.solve_matrix(&left.transpose())))
}

/// Tuning for [`two_step_estimate_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TwoStepOptions {
    /// Uniform mixing weight applied to the optimal plan (0 disables it).
    pub pi_floor: f64,
    pub policy: SingularPolicy,
    /// Ignore measurement error: Σuu = 0 throughout, naive pilot.
    pub uncorrected: bool,
}

#[derive(Debug, Clone)]
pub struct TwoStepResult {
    pub beta: DVector<f64>,
    pub pilot_beta: DVector<f64>,
    pub plan: SamplingPlan,
    pub cov: DMatrix<f64>,
    /// Whether the plug-in covariance needed eigenvalue clipping.
    pub cov_projected: bool,
    pub pooled: WeightedSubsample,
    pub r0: usize,
    pub r: usize,
    /// The optimal plan was degenerate and uniform sampling was used instead.
    pub fell_back_to_uniform: bool,
}

/// Pilot of `r0` uniform draws, then `r` draws from the A- or L-optimal plan
/// evaluated at the pilot; the pooled `r0 + r` draws are each weighted by
/// their own draw probability.
pub fn two_step_estimate(
    data: &Dataset,
    sigma: &ErrorCovariance,
    r0: usize,
    r: usize,
    criterion: Criterion,
    seed: Seed,
) -> Result<TwoStepResult> {
    two_step_estimate_with(data, sigma, r0, r, criterion, seed, TwoStepOptions::default())
}

pub fn two_step_estimate_with(
    data: &Dataset,
    sigma: &ErrorCovariance,
    r0: usize,
    r: usize,
    criterion: Criterion,
    seed: Seed,
    options: TwoStepOptions,
) -> Result<TwoStepResult> {
    sigma.check_dim(data.p())?;
    if r0 < data.p() + 1 {
        return Err(EivError::InvalidParameter {
            name: "r0",
            reason: format!("pilot size must be at least p + 1 = {}, got {r0}", data.p() + 1),
        });
    }
    let zero;
    let sigma = if options.uncorrected {
        zero = ErrorCovariance::zero(data.p());
        &zero
    } else {
        sigma
    };

    let uniform = uniform_probs(data.n())?;
    let pilot_draws = draw_seeded(&uniform, r0, seed.derive(stage::PILOT))?;
    let pilot = weighted_corrected_estimate_with(&pilot_draws, data, sigma, options.policy)
        .map_err(|e| match e {
            EivError::Singular { .. } => EivError::PilotFailure {
                r0,
                source: Box::new(e),
            },
            other => other,
        })?;

    let planned = if options.uncorrected {
        uncorrected_variant(criterion, data, &pilot.beta)
    } else {
        optimal_probs(criterion, data, &pilot.beta, sigma)
    };
    let (plan, fell_back) = match planned {
        Ok(plan) => (plan.with_floor(options.pi_floor)?, false),
        Err(EivError::DegeneratePlan(why)) => {
            log::warn!("optimal plan degenerate ({why}); sampling uniformly");
            (uniform.clone(), true)
        }
        Err(e) => return Err(e),
    };
    let plan = match (options.uncorrected, plan.design()) {
        (true, Design::MV) => plan.retag(Design::UncorrectedMV),
        (true, Design::MVc) => plan.retag(Design::UncorrectedMVc),
        _ => plan,
    };

    let main_draws = draw_seeded(&plan, r, seed.derive(stage::MAIN))?;
    let pooled = pilot_draws.pooled(&main_draws);
    let estimate = weighted_corrected_estimate_with(&pooled, data, sigma, options.policy)?;
    let (cov, cov_projected) = plugin_covariance(&pooled, &estimate.beta, data, sigma)?;

    Ok(TwoStepResult {
        beta: estimate.beta,
        pilot_beta: pilot.beta,
        plan,
        cov,
        cov_projected,
        pooled,
        r0,
        r,
        fell_back_to_uniform: fell_back,
    })
}
