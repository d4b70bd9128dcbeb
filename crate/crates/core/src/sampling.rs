//! Sampling designs: uniform, leverage, the A-/L-optimal residual-weighted
//! probabilities (corrected and uncorrected), and IBOSS subdata selection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eiv::{check_len, corrected_hessian, Dataset, ErrorCovariance};
use crate::error::{EivError, Result};
use crate::linalg::{factor_checked, pairwise_sum, symmetrize, SingularPolicy};

/// Provenance of a sampling plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "UNIF")]
    Uniform,
    #[serde(rename = "BLEV")]
    Leverage,
    #[serde(rename = "mV")]
    MV,
    #[serde(rename = "mVc")]
    MVc,
    #[serde(rename = "UmV")]
    UncorrectedMV,
    #[serde(rename = "UmVc")]
    UncorrectedMVc,
    #[serde(rename = "IBOSS")]
    Iboss,
}

impl Design {
    pub fn tag(self) -> &'static str {
        match self {
            Design::Uniform => "UNIF",
            Design::Leverage => "BLEV",
            Design::MV => "mV",
            Design::MVc => "mVc",
            Design::UncorrectedMV => "UmV",
            Design::UncorrectedMVc => "UmVc",
            Design::Iboss => "IBOSS",
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Design {
    type Err = EivError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Design::Uniform,
            Design::Leverage,
            Design::MV,
            Design::MVc,
            Design::UncorrectedMV,
            Design::UncorrectedMVc,
            Design::Iboss,
        ]
        .into_iter()
        .find(|d| d.tag().eq_ignore_ascii_case(s))
        .ok_or_else(|| EivError::Config(format!("unknown design {s:?}")))
    }
}

/// Optimality criterion for the residual-weighted probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    /// A-optimal: minimizes tr(V).
    #[serde(rename = "mV")]
    MV,
    /// L-optimal: minimizes tr(V_c).
    #[serde(rename = "mVc")]
    MVc,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanKind {
    Probabilistic(Vec<f64>),
    Deterministic(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    design: Design,
    kind: PlanKind,
}

impl SamplingPlan {
    /// Normalizes non-negative scores into probabilities.
    pub fn from_scores(scores: Vec<f64>, design: Design) -> Result<Self> {
        if scores.is_empty() {
            return Err(EivError::EmptyDataset);
        }
        if scores.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(EivError::InvalidInput(
                "sampling scores must be finite and non-negative".into(),
            ));
        }
        let total = pairwise_sum(&scores);
        if total <= 0.0 {
            return Err(EivError::DegeneratePlan("every sampling score is zero"));
        }
        let probs = scores.into_iter().map(|s| s / total).collect();
        Ok(SamplingPlan {
            design,
            kind: PlanKind::Probabilistic(probs),
        })
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub(crate) fn retag(mut self, design: Design) -> Self {
        self.design = design;
        self
    }

    pub fn kind(&self) -> &PlanKind {
        &self.kind
    }

    pub fn probs(&self) -> Option<&[f64]> {
        match &self.kind {
            PlanKind::Probabilistic(p) => Some(p),
            PlanKind::Deterministic(_) => None,
        }
    }

    pub fn indices(&self) -> Option<&[usize]> {
        match &self.kind {
            PlanKind::Deterministic(i) => Some(i),
            PlanKind::Probabilistic(_) => None,
        }
    }

    /// Mixes the plan with uniform sampling so that `n·πᵢ ≥ floor` for every
    /// record. `floor = 0` leaves the plan unchanged.
    pub fn with_floor(self, floor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&floor) {
            return Err(EivError::InvalidParameter {
                name: "pi_floor",
                reason: format!("must lie in [0, 1], got {floor}"),
            });
        }
        match self.kind {
            PlanKind::Probabilistic(probs) if floor > 0.0 => {
                let n = probs.len() as f64;
                let mixed = probs
                    .into_iter()
                    .map(|p| (1.0 - floor) * p + floor / n)
                    .collect();
                Ok(SamplingPlan {
                    design: self.design,
                    kind: PlanKind::Probabilistic(mixed),
                })
            }
            _ => Ok(self),
        }
    }
}

/// πᵢ = 1/n.
pub fn uniform_probs(n: usize) -> Result<SamplingPlan> {
    if n == 0 {
        return Err(EivError::EmptyDataset);
    }
    Ok(SamplingPlan {
        design: Design::Uniform,
        kind: PlanKind::Probabilistic(vec![1.0 / n as f64; n]),
    })
}

/// Applies `f` to every row of `w` (as a contiguous slice), in parallel over
/// row blocks. Output order matches row order whatever the partitioning.
fn map_rows<F>(w: &DMatrix<f64>, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) -> f64 + Sync,
{
    const BLOCK: usize = 512;
    let (n, p) = w.shape();
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&start| {
            let b = BLOCK.min(n - start);
            let block = w.rows(start, b).transpose();
            let mut buf = vec![0.0; p];
            (0..b)
                .map(|k| {
                    buf.copy_from_slice(block.column(k).as_slice());
                    f(start + k, &mut buf)
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn residual_scores(
    data: &Dataset,
    beta: &DVector<f64>,
    norm_of_row: impl Fn(&mut [f64]) -> f64 + Sync,
) -> Result<Vec<f64>> {
    let resid = data.residuals(beta)?;
    Ok(map_rows(data.w(), |i, row| {
        let e = resid[i].abs();
        if e == 0.0 {
            0.0
        } else {
            e * norm_of_row(row)
        }
    }))
}

/// `H_W⁻ᵀ`, so that row i of `W · H_W⁻ᵀ` is `(H_W⁻¹Wᵢ)ᵀ`.
fn hessian_inverse_t(data: &Dataset, sigma: &ErrorCovariance) -> Result<DMatrix<f64>> {
    let h = corrected_hessian(data, sigma)?;
    let lu = factor_checked(&h, "corrected Hessian H_W", SingularPolicy::Fail)?.lu;
    let p = data.p();
    Ok(lu.solve_matrix(&DMatrix::identity(p, p)).transpose())
}

/// For each row i, `f(i, Wᵢ, (W·right)ᵢ)`. Products are formed one row block at
/// a time with GEMM; the output order is the row order.
fn map_transformed_rows<F>(w: &DMatrix<f64>, right: &DMatrix<f64>, f: F) -> Vec<f64>
where
    F: Fn(usize, &[f64], &[f64]) -> f64 + Sync,
{
    const BLOCK: usize = 512;
    let n = w.nrows();
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&start| {
            let b = BLOCK.min(n - start);
            let rows = w.rows(start, b);
            let orig = rows.transpose();
            let prod = (rows * right).transpose();
            (0..b)
                .map(|k| f(start + k, orig.column(k).as_slice(), prod.column(k).as_slice()))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mv_plan(data: &Dataset, beta: &DVector<f64>, sigma: &ErrorCovariance, design: Design) -> Result<SamplingPlan> {
    sigma.check_dim(data.p())?;
    check_len("pilot coefficient vector", data.p(), beta.len())?;
    let hinv_t = hessian_inverse_t(data, sigma)?;
    let resid = data.residuals(beta)?;
    let scores = map_transformed_rows(data.w(), &hinv_t, |i, _, t| {
        let e = resid[i].abs();
        if e == 0.0 {
            0.0
        } else {
            e * euclid(t)
        }
    });
    SamplingPlan::from_scores(scores, design)
}

fn mvc_plan(data: &Dataset, beta: &DVector<f64>, design: Design) -> Result<SamplingPlan> {
    check_len("pilot coefficient vector", data.p(), beta.len())?;
    let scores = residual_scores(data, beta, |row| euclid(row))?;
    SamplingPlan::from_scores(scores, design)
}

/// A-optimal probabilities πᵢ ∝ |yᵢ − Wᵢᵀβ|·‖H_W⁻¹Wᵢ‖ with the corrected
/// `H_W = (1/n)ΣWWᵀ − Σuu`.
pub fn optimal_probs_mv(
    data: &Dataset,
    beta_pilot: &DVector<f64>,
    sigma: &ErrorCovariance,
) -> Result<SamplingPlan> {
    mv_plan(data, beta_pilot, sigma, Design::MV)
}

/// L-optimal probabilities πᵢ ∝ |yᵢ − Wᵢᵀβ|·‖Wᵢ‖.
pub fn optimal_probs_mvc(data: &Dataset, beta_pilot: &DVector<f64>) -> Result<SamplingPlan> {
    mvc_plan(data, beta_pilot, Design::MVc)
}

pub fn optimal_probs(
    criterion: Criterion,
    data: &Dataset,
    beta_pilot: &DVector<f64>,
    sigma: &ErrorCovariance,
) -> Result<SamplingPlan> {
    match criterion {
        Criterion::MV => optimal_probs_mv(data, beta_pilot, sigma),
        Criterion::MVc => optimal_probs_mvc(data, beta_pilot),
    }
}

/// The optimal formulas with Σuu forced to zero, evaluated at a naive pilot.
pub fn uncorrected_variant(
    criterion: Criterion,
    data: &Dataset,
    beta_pilot_naive: &DVector<f64>,
) -> Result<SamplingPlan> {
    match criterion {
        Criterion::MV => mv_plan(
            data,
            beta_pilot_naive,
            &ErrorCovariance::zero(data.p()),
            Design::UncorrectedMV,
        ),
        Criterion::MVc => mvc_plan(data, beta_pilot_naive, Design::UncorrectedMVc),
    }
}

/// Statistical leverage scores `hᵢᵢ = Wᵢᵀ(WᵀW)⁻¹Wᵢ`.
pub fn leverage_scores(data: &Dataset) -> Result<Vec<f64>> {
    let (gram, _) = data.moments();
    let lu = factor_checked(&gram, "Gram matrix WᵀW", SingularPolicy::Fail)?.lu;
    let p = data.p();
    let inv = symmetrize(&lu.solve_matrix(&DMatrix::identity(p, p)));
    Ok(map_transformed_rows(data.w(), &inv, |_, w, t| {
        w.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()
    }))
}

/// BLEV: πᵢ = hᵢᵢ / Σⱼ hⱼⱼ (= hᵢᵢ / p).
pub fn leverage_probs(data: &Dataset) -> Result<SamplingPlan> {
    let scores = leverage_scores(data)?
        .into_iter()
        .map(|h| h.max(0.0))
        .collect();
    SamplingPlan::from_scores(scores, Design::Leverage)
}

/// IBOSS subdata: sweeping columns in order, take the ⌊k/2p⌋ smallest and
/// ⌊k/2p⌋ largest not-yet-selected records of each; any shortfall is filled
/// with the unselected records of largest max-absolute covariate. Ties go to
/// the lower record index.
pub fn iboss_select(data: &Dataset, k: usize) -> Result<SamplingPlan> {
    let (n, p) = (data.n(), data.p());
    if k > n {
        return Err(EivError::Size {
            requested: k,
            available: n,
        });
    }
    let w = data.w();
    let per_side = k / (2 * p);
    let mut selected = vec![false; n];
    let mut chosen = Vec::with_capacity(k);

    let take = |candidates: &mut Vec<usize>,
                    count: usize,
                    cmp: &dyn Fn(&usize, &usize) -> Ordering,
                    selected: &mut Vec<bool>,
                    chosen: &mut Vec<usize>| {
        if count == 0 || candidates.is_empty() {
            return;
        }
        let count = count.min(candidates.len());
        if count < candidates.len() {
            candidates.select_nth_unstable_by(count - 1, cmp);
        }
        let mut best: Vec<usize> = candidates[..count].to_vec();
        best.sort_unstable_by(cmp);
        for i in best {
            selected[i] = true;
            chosen.push(i);
        }
    };

    for j in 0..p {
        if per_side == 0 {
            break;
        }
        let col = w.column(j);
        let smallest = |a: &usize, b: &usize| col[*a].total_cmp(&col[*b]).then(a.cmp(b));
        let largest = |a: &usize, b: &usize| col[*b].total_cmp(&col[*a]).then(a.cmp(b));
        let mut candidates: Vec<usize> = (0..n).filter(|&i| !selected[i]).collect();
        take(&mut candidates, per_side, &smallest, &mut selected, &mut chosen);
        let mut candidates: Vec<usize> = (0..n).filter(|&i| !selected[i]).collect();
        take(&mut candidates, per_side, &largest, &mut selected, &mut chosen);
    }

    if chosen.len() < k {
        let max_abs: Vec<f64> = (0..n).map(|i| w.row(i).amax()).collect();
        let by_extremity = |a: &usize, b: &usize| max_abs[*b].total_cmp(&max_abs[*a]).then(a.cmp(b));
        let mut candidates: Vec<usize> = (0..n).filter(|&i| !selected[i]).collect();
        let missing = k - chosen.len();
        take(&mut candidates, missing, &by_extremity, &mut selected, &mut chosen);
    }

    chosen.sort_unstable();
    Ok(SamplingPlan {
        design: Design::Iboss,
        kind: PlanKind::Deterministic(chosen),
    })
}

/// `tr(V_c*)` with `V_c* = (1/(r n²)) Σ eᵢ² WᵢWᵢᵀ / πᵢ`: the π-dependent part of
/// the L-criterion. Records with πᵢ = 0 must have a zero numerator.
pub fn l_criterion_trace(data: &Dataset, beta_hat: &DVector<f64>, probs: &[f64], r: usize) -> Result<f64> {
    check_len("probability vector", data.n(), probs.len())?;
    let resid = data.residuals(beta_hat)?;
    let n = data.n() as f64;
    let terms = map_rows(data.w(), |i, row| {
        let num = resid[i] * resid[i] * row.iter().map(|v| v * v).sum::<f64>();
        if num == 0.0 {
            0.0
        } else {
            num / probs[i]
        }
    });
    Ok(pairwise_sum(&terms) / (r as f64 * n * n))
}

/// `tr(H_W⁻¹ V_c* H_W⁻¹)`: the π-dependent part of the A-criterion.
pub fn a_criterion_trace(
    data: &Dataset,
    beta_hat: &DVector<f64>,
    sigma: &ErrorCovariance,
    probs: &[f64],
    r: usize,
) -> Result<f64> {
    check_len("probability vector", data.n(), probs.len())?;
    let hinv_t = hessian_inverse_t(data, sigma)?;
    let resid = data.residuals(beta_hat)?;
    let n = data.n() as f64;
    let terms = map_transformed_rows(data.w(), &hinv_t, |i, _, t| {
        let num = resid[i] * resid[i] * t.iter().map(|v| v * v).sum::<f64>();
        if num == 0.0 {
            0.0
        } else {
            num / probs[i]
        }
    });
    Ok(pairwise_sum(&terms) / (r as f64 * n * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(w: &[f64], y: &[f64]) -> Dataset {
        Dataset::new(DMatrix::from_column_slice(w.len(), 1, w), DVector::from_column_slice(y)).unwrap()
    }

    #[test]
    fn uniform_exact() {
        let plan = uniform_probs(4).unwrap();
        assert_eq!(plan.probs().unwrap(), &[0.25; 4]);
        assert_eq!(uniform_probs(1).unwrap().probs().unwrap(), &[1.0]);
        assert!(matches!(uniform_probs(0), Err(EivError::EmptyDataset)));
        for n in [3usize, 7, 1000, 12345] {
            let s: f64 = pairwise_sum(uniform_probs(n).unwrap().probs().unwrap());
            assert!((s - 1.0).abs() <= 1e-15, "n = {n}: {s}");
        }
    }

    #[test]
    fn mv_hand_case() {
        let data = scalar(&[1.0, 2.0], &[0.0, 0.0]);
        let beta = DVector::from_element(1, 1.0);
        let plan = optimal_probs_mv(&data, &beta, &ErrorCovariance::zero(1)).unwrap();
        let p = plan.probs().unwrap();
        assert_relative_eq!(p[0], 0.2, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.8, epsilon = 1e-15);
        assert_eq!(plan.design(), Design::MV);
    }

    #[test]
    fn mvc_hand_case_and_scale_invariance() {
        let data = scalar(&[1.0, 2.0], &[0.0, 0.0]);
        let plan = optimal_probs_mvc(&data, &DVector::from_element(1, 1.0)).unwrap();
        assert_relative_eq!(plan.probs().unwrap()[0], 0.2, epsilon = 1e-15);
        assert_relative_eq!(plan.probs().unwrap()[1], 0.8, epsilon = 1e-15);

        let data = scalar(&[1.0, -2.0, 0.5], &[0.3, 1.0, -2.0]);
        let beta = DVector::from_element(1, 0.7);
        let base = optimal_probs_mvc(&data, &beta).unwrap();
        let scaled = scalar(&[1.0, -2.0, 0.5], &[0.9, 3.0, -6.0]);
        let other = optimal_probs_mvc(&scaled, &(beta * 3.0)).unwrap();
        for (a, b) in base.probs().unwrap().iter().zip(other.probs().unwrap()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn identical_scores_give_uniform() {
        let data = Dataset::from_rows(&vec![vec![1.0, 1.0]; 4], vec![3.0; 4]).unwrap();
        let beta = DVector::from_vec(vec![1.0, 1.0]);
        let plan = optimal_probs_mvc(&data, &beta).unwrap();
        assert!(plan.probs().unwrap().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn zero_residual_record_has_zero_probability() {
        let data = scalar(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]);
        let plan = optimal_probs_mvc(&data, &DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(plan.probs().unwrap()[0], 0.0);
    }

    #[test]
    fn perfect_fit_is_degenerate() {
        let data = scalar(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]);
        let beta = DVector::from_element(1, 2.0);
        assert!(matches!(optimal_probs_mvc(&data, &beta), Err(EivError::DegeneratePlan(_))));
        assert!(matches!(
            optimal_probs_mv(&data, &beta, &ErrorCovariance::zero(1)),
            Err(EivError::DegeneratePlan(_))
        ));
    }

    #[test]
    fn mv_singular_hessian() {
        let data = scalar(&[1.0, 1.0], &[0.0, 1.0]);
        let sigma = ErrorCovariance::isotropic(1, 1.0).unwrap();
        assert!(matches!(
            optimal_probs_mv(&data, &DVector::from_element(1, 1.0), &sigma),
            Err(EivError::Singular { .. })
        ));
    }

    #[test]
    fn leverage_hand_case() {
        let data = scalar(&[1.0, 2.0, 3.0], &[0.0; 3]);
        let plan = leverage_probs(&data).unwrap();
        let p = plan.probs().unwrap();
        for (got, want) in p.iter().zip([1.0 / 14.0, 4.0 / 14.0, 9.0 / 14.0]) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn leverage_orthonormal_equal_rows_is_uniform() {
        let s = 0.5;
        let rows = vec![vec![s, s], vec![s, -s], vec![-s, s], vec![-s, -s]];
        let data = Dataset::from_rows(&rows, vec![0.0; 4]).unwrap();
        let h = leverage_scores(&data).unwrap();
        assert!(h.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let plan = leverage_probs(&data).unwrap();
        assert!(plan.probs().unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn iboss_single_column() {
        let data = scalar(&[5.0, 1.0, 9.0, 3.0], &[0.0; 4]);
        assert_eq!(iboss_select(&data, 2).unwrap().indices().unwrap(), &[1, 2]);
        assert_eq!(iboss_select(&data, 4).unwrap().indices().unwrap(), &[0, 1, 2, 3]);
        assert!(matches!(iboss_select(&data, 5), Err(EivError::Size { .. })));
    }

    #[test]
    fn iboss_ties_prefer_lower_index() {
        let data = scalar(&[1.0, 1.0, 1.0, 1.0], &[0.0; 4]);
        assert_eq!(iboss_select(&data, 2).unwrap().indices().unwrap(), &[0, 1]);
    }

    #[test]
    fn floor_guards_small_probabilities() {
        let plan = SamplingPlan::from_scores(vec![0.0, 1.0, 3.0], Design::MVc).unwrap();
        let floored = plan.clone().with_floor(0.3).unwrap();
        let p = floored.probs().unwrap();
        assert!(p.iter().all(|&v| 3.0 * v >= 0.3 - 1e-15));
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_eq!(plan.clone().with_floor(0.0).unwrap(), plan);
        assert!(plan.with_floor(1.5).is_err());
    }

    #[test]
    fn design_tags_round_trip() {
        for d in ["UNIF", "BLEV", "mV", "mVc", "UmV", "UmVc", "IBOSS"] {
            assert_eq!(d.parse::<Design>().unwrap().tag(), d);
        }
        assert!("nope".parse::<Design>().is_err());
    }
}
