#![allow(dead_code)]

use eivsub::subsample::{weighted_hessian, weighted_score, WeightedSubsample};
use eivsub::{Dataset, ErrorCovariance, Seed};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Small Gaussian regression with correlated columns and a known error covariance.
pub fn fixture(n: usize, p: usize, sigma_u2: f64, seed: u64) -> (Dataset, ErrorCovariance) {
    let mut rng = Seed::new(seed).rng();
    let w = DMatrix::from_fn(n, p, |i, j| {
        let z: f64 = rng.sample(StandardNormal);
        z + 0.3 * (j as f64) + 0.2 * ((i + j) % 3) as f64
    });
    let beta = DVector::from_fn(p, |j, _| 1.0 - 0.4 * j as f64);
    let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = &w * &beta + noise;
    (
        Dataset::new(w, y).unwrap(),
        ErrorCovariance::isotropic(p, sigma_u2).unwrap(),
    )
}

/// Strictly positive, non-uniform probabilities summing to one.
pub fn skewed_probs(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Visits every ordered draw of length r from n records together with its
/// probability under with-replacement sampling.
pub fn for_each_ordered_draw(n: usize, r: usize, probs: &[f64], mut visit: impl FnMut(&[usize], f64)) {
    let mut idx = vec![0usize; r];
    loop {
        let weight: f64 = idx.iter().map(|&i| probs[i]).product();
        visit(&idx, weight);
        let mut pos = r;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < n {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Exact expectations of the subsample Hessian and of the subsample score at
/// `beta`, by enumeration of all nʳ ordered draws.
pub fn enumerated_moments(
    data: &Dataset,
    sigma: &ErrorCovariance,
    probs: &[f64],
    r: usize,
    beta: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let p = data.p();
    let mut hess = DMatrix::zeros(p, p);
    let mut score = DVector::zeros(p);
    let mut mass = 0.0;
    for_each_ordered_draw(data.n(), r, probs, |idx, weight| {
        let pi: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
        let sub = WeightedSubsample::new(idx.to_vec(), pi).unwrap();
        hess += weighted_hessian(&sub, data, sigma).unwrap() * weight;
        score += weighted_score(&sub, data, sigma, beta).unwrap() * weight;
        mass += weight;
    });
    (hess, score, mass)
}

/// Direct evaluation of the pooled within-record scatter over Σ(Jᵢ − 1).
pub fn brute_sigma_uu(replicates: &[Vec<Vec<f64>>]) -> DMatrix<f64> {
    let p = replicates[0][0].len();
    let mut scatter = DMatrix::zeros(p, p);
    let mut dof = 0usize;
    for reps in replicates {
        let j = reps.len();
        dof += j - 1;
        for a in 0..p {
            for b in 0..p {
                let ma: f64 = reps.iter().map(|w| w[a]).sum::<f64>() / j as f64;
                let mb: f64 = reps.iter().map(|w| w[b]).sum::<f64>() / j as f64;
                let s: f64 = reps.iter().map(|w| (w[a] - ma) * (w[b] - mb)).sum();
                scatter[(a, b)] += s;
            }
        }
    }
    scatter / dof as f64
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Least-squares slope of y on x.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Sample covariance of a set of vectors (denominator k − 1).
pub fn sample_cov(draws: &[DVector<f64>]) -> DMatrix<f64> {
    let k = draws.len();
    let p = draws[0].len();
    let mut centre = DVector::zeros(p);
    for d in draws {
        centre += d;
    }
    centre /= k as f64;
    let mut cov = DMatrix::zeros(p, p);
    for d in draws {
        let dev = d - &centre;
        cov += &dev * dev.transpose();
    }
    cov / (k - 1) as f64
}

pub struct PerturbationMoments {
    pub mass: f64,
    pub mean_score: DVector<f64>,
    pub second: DMatrix<f64>,
    /// `(Var ψ / n²) Σ gᵢgᵢᵀ` with `gᵢ = Wᵢ(yᵢ − Wᵢᵀβ̂)`.
    pub expected_second: DMatrix<f64>,
}

/// Exact first and second moments of the perturbed score at the full-data
/// estimate. The multiplier ν takes (1 ± bq)/q with equal probability, which
/// matches E ν = 1/q and Var ν = b²; the score is linear in ψ, so only these
/// two moments matter. Enumerates all 3ⁿ gate/multiplier patterns.
pub fn enumerated_perturbation_moments(
    data: &Dataset,
    sigma: &ErrorCovariance,
    q: f64,
    b2: f64,
) -> PerturbationMoments {
    use eivsub::eiv::full_corrected_estimate;
    use eivsub::perturbation::{perturbed_score, PerturbationWeights};
    let (n, p) = (data.n(), data.p());
    let beta_hat = full_corrected_estimate(data, sigma).unwrap().beta;
    let spread = b2.sqrt() * q;
    let mut mean_score = DVector::zeros(p);
    let mut second = DMatrix::zeros(p, p);
    let mut mass = 0.0;
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let mut psi = vec![0.0; n];
        let mut prob = 1.0;
        for v in psi.iter_mut() {
            match c % 3 {
                0 => prob *= 1.0 - q,
                1 => {
                    prob *= q / 2.0;
                    *v = (1.0 + spread) / q;
                }
                _ => {
                    prob *= q / 2.0;
                    *v = (1.0 - spread) / q;
                }
            }
            c /= 3;
        }
        if prob == 0.0 {
            continue;
        }
        let score = if psi.iter().all(|v| *v == 0.0) {
            -(sigma.matrix() * &beta_hat)
        } else {
            let w = PerturbationWeights::from_dense(&psi, q, b2).unwrap();
            perturbed_score(data, sigma, &w, &beta_hat).unwrap()
        };
        mean_score += &score * prob;
        second += &score * score.transpose() * prob;
        mass += prob;
    }
    let var_psi = (1.0 - q + b2 * q * q) / q;
    let resid = data.residuals(&beta_hat).unwrap();
    let mut expected_second = DMatrix::zeros(p, p);
    for i in 0..n {
        let g = data.w().row(i).transpose() * resid[i];
        expected_second += &g * g.transpose() * (var_psi / (n * n) as f64);
    }
    PerturbationMoments {
        mass,
        mean_score,
        second,
        expected_second,
    }
}
