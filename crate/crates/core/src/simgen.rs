//! Synthetic measurement-error data: AR(1)-correlated Gaussian or Student-t₃
//! covariates, additive Gaussian errors and a linear Gaussian response.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eiv::{Dataset, ErrorCovariance, ReplicatedDataset};
use crate::error::{EivError, Result};
use crate::rng::{stage, Seed};

const BLOCK_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    /// X ~ N(0, Σ).
    #[default]
    Normal,
    /// X ~ t₃ built as Z/√(G/3) with Z ~ N(0, Σ) and G ~ χ²₃.
    StudentT3,
}

/// How Σ enters the t₃ law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TScale {
    /// Σ is the scale matrix; Cov(X) = 3Σ.
    #[default]
    Scale,
    /// Σ is the covariance matrix; the draw is shrunk by 1/√3.
    Covariance,
}

fn default_rho() -> f64 {
    0.5
}

fn default_noise_var() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    #[serde(default)]
    pub case: CovariateLaw,
    pub n: usize,
    pub p: usize,
    /// True coefficients; all ones when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_true: Option<Vec<f64>>,
    pub sigma_u2: f64,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    /// AR(1) correlation of the covariates.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub t_scale: TScale,
    #[serde(default)]
    pub seed: u64,
}

impl SimScenario {
    /// n records of p covariates with β = 1, unit noise and ρ = 0.5.
    pub fn new(case: CovariateLaw, n: usize, p: usize, sigma_u2: f64, seed: u64) -> Self {
        SimScenario {
            case,
            n,
            p,
            beta_true: None,
            sigma_u2,
            noise_var: 1.0,
            rho: 0.5,
            t_scale: TScale::Scale,
            seed,
        }
    }

    /// The standard five-covariate setup with n = 10⁴.
    pub fn case1(sigma_u2: f64, seed: u64) -> Self {
        SimScenario::new(CovariateLaw::Normal, 10_000, 5, sigma_u2, seed)
    }

    pub fn case2(sigma_u2: f64, seed: u64) -> Self {
        SimScenario::new(CovariateLaw::StudentT3, 10_000, 5, sigma_u2, seed)
    }

    pub fn beta(&self) -> DVector<f64> {
        match &self.beta_true {
            Some(b) => DVector::from_column_slice(b),
            None => DVector::from_element(self.p, 1.0),
        }
    }

    pub fn error_covariance(&self) -> Result<ErrorCovariance> {
        ErrorCovariance::isotropic(self.p, self.sigma_u2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(EivError::InvalidParameter { name, reason });
        if self.p == 0 || self.n < self.p {
            return bad("n, p", format!("need n ≥ p ≥ 1, got n = {}, p = {}", self.n, self.p));
        }
        if !(self.sigma_u2 >= 0.0) || !self.sigma_u2.is_finite() {
            return bad("sigma_u2", format!("must be finite and ≥ 0, got {}", self.sigma_u2));
        }
        if !(self.noise_var > 0.0) || !self.noise_var.is_finite() {
            return bad("noise_var", format!("must be finite and > 0, got {}", self.noise_var));
        }
        if !(self.rho.abs() < 1.0) {
            return bad("rho", format!("must lie in (−1, 1), got {}", self.rho));
        }
        if let Some(b) = &self.beta_true {
            if b.len() != self.p {
                return Err(EivError::DimensionMismatch {
                    context: "beta_true",
                    expected: self.p,
                    found: b.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub x_true: DMatrix<f64>,
    pub dataset: Dataset,
    pub u: DMatrix<f64>,
    pub sigma: ErrorCovariance,
    pub beta_true: DVector<f64>,
}

/// Σ_{jk} = ρ^{|j−k|}.
pub fn ar1_correlation(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |j, k| if j == k { 1.0 } else { rho.powi(j.abs_diff(k) as i32) })
}

/// Applies `fill` to each row of a row-major buffer, block by block, each
/// block drawing from its own stream so the output does not depend on the
/// thread count.
fn fill_blocks<F>(buf: &mut [f64], p: usize, seed: Seed, fill: F)
where
    F: Fn(&mut rand_chacha::ChaCha8Rng, &mut [f64]) + Sync,
{
    if p == 0 {
        return;
    }
    buf.par_chunks_mut(BLOCK_ROWS * p)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = seed.derive(b as u64).rng();
            for row in chunk.chunks_mut(p) {
                fill(&mut rng, row);
            }
        });
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn covariates(s: &SimScenario, seed: Seed) -> Vec<f64> {
    let rho = s.rho;
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = vec![0.0; s.n * s.p];
    fill_blocks(&mut x, s.p, seed.derive(stage::COVARIATES), |rng, row| {
        let mut prev = normal(rng);
        row[0] = prev;
        for v in row.iter_mut().skip(1) {
            prev = rho * prev + innov * normal(rng);
            *v = prev;
        }
    });
    if s.case == CovariateLaw::StudentT3 {
        let chi = ChiSquared::new(3.0).expect("valid degrees of freedom");
        let shrink = match s.t_scale {
            TScale::Scale => 1.0,
            TScale::Covariance => (1.0f64 / 3.0).sqrt(),
        };
        let mut scales = vec![0.0; s.n];
        fill_blocks(&mut scales, 1, seed.derive(stage::MIXING), |rng, v| {
            let g: f64 = chi.sample(rng);
            v[0] = shrink / (g / 3.0).sqrt();
        });
        x.par_chunks_mut(s.p)
            .zip(scales.par_iter())
            .for_each(|(row, &c)| row.iter_mut().for_each(|v| *v *= c));
    }
    x
}

/// Adds independent N(0, sd²) draws to every entry.
fn add_gaussian(buf: &mut [f64], p: usize, sd: f64, seed: Seed) {
    if sd == 0.0 {
        return;
    }
    fill_blocks(buf, p, seed, |rng, row| {
        row.iter_mut().for_each(|v| *v += sd * normal(rng));
    });
}

/// y = Xβ + ε from a row-major X.
fn response(x: &[f64], p: usize, beta: &DVector<f64>, noise_var: f64, seed: Seed) -> DVector<f64> {
    let mut y: Vec<f64> = x
        .chunks(p)
        .map(|row| row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum())
        .collect();
    add_gaussian(&mut y, 1, noise_var.sqrt(), seed.derive(stage::RESPONSE));
    DVector::from_vec(y)
}

/// Draws (X, U, y) for a scenario; W = X + U.
pub fn generate(s: &SimScenario) -> Result<GeneratedData> {
    s.validate()?;
    let seed = Seed::new(s.seed);
    let beta = s.beta();
    let xbuf = covariates(s, seed);
    let y = response(&xbuf, s.p, &beta, s.noise_var, seed);
    let mut wbuf = xbuf.clone();
    add_gaussian(&mut wbuf, s.p, s.sigma_u2.sqrt(), seed.derive(stage::ERRORS));
    let x = DMatrix::from_row_slice(s.n, s.p, &xbuf);
    let w = DMatrix::from_row_slice(s.n, s.p, &wbuf);
    // Stored as the rounded difference so that W − X reproduces it exactly.
    let u = &w - &x;
    Ok(GeneratedData {
        x_true: x,
        dataset: Dataset::new(w, y)?,
        u,
        sigma: s.error_covariance()?,
        beta_true: beta,
    })
}

/// The observed dataset of [`generate`] without keeping X and U around.
pub fn generate_observed(s: &SimScenario) -> Result<Dataset> {
    s.validate()?;
    let seed = Seed::new(s.seed);
    let mut buf = covariates(s, seed);
    let y = response(&buf, s.p, &s.beta(), s.noise_var, seed);
    add_gaussian(&mut buf, s.p, s.sigma_u2.sqrt(), seed.derive(stage::ERRORS));
    Dataset::new(DMatrix::from_row_slice(s.n, s.p, &buf), y)
}

/// Like [`generate`] but with `j` independent error draws per record,
/// `W_ij = X_i + U_ij`.
pub fn generate_replicated(s: &SimScenario, j: usize) -> Result<(ReplicatedDataset, DMatrix<f64>)> {
    s.validate()?;
    if j == 0 {
        return Err(EivError::InvalidParameter {
            name: "j",
            reason: "need at least one replicate".into(),
        });
    }
    let seed = Seed::new(s.seed);
    let beta = s.beta();
    let xbuf = covariates(s, seed);
    let y = response(&xbuf, s.p, &beta, s.noise_var, seed);
    let sd = s.sigma_u2.sqrt();
    let draws: Vec<Vec<f64>> = (0..j)
        .map(|k| {
            let mut w = xbuf.clone();
            add_gaussian(&mut w, s.p, sd, seed.derive2(stage::ERRORS, k as u64));
            w
        })
        .collect();
    let reps = (0..s.n)
        .map(|i| draws.iter().map(|w| w[i * s.p..(i + 1) * s.p].to_vec()).collect())
        .collect();
    let x = DMatrix::from_row_slice(s.n, s.p, &xbuf);
    Ok((ReplicatedDataset::new(reps, y.as_slice().to_vec())?, x))
}

/// The one-covariate illustration: x ~ N(0, 1), u ~ N(0, 0.5²), ε ~ N(0, 1),
/// y = 0.5 + 0.5x + ε, n = 1000. Columns are (w, 1) with β = (0.5, 0.5); the
/// intercept column carries no error.
pub fn example1(seed: u64, sigma_u2: f64) -> Result<GeneratedData> {
    let n = 1000;
    let s = SimScenario::new(CovariateLaw::Normal, n, 1, sigma_u2, seed);
    let seed = Seed::new(seed);
    let xs = covariates(&s, seed);
    let mut ws = xs.clone();
    add_gaussian(&mut ws, 1, sigma_u2.sqrt(), seed.derive(stage::ERRORS));
    let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { xs[i] } else { 1.0 });
    let w = DMatrix::from_fn(n, 2, |i, c| if c == 0 { ws[i] } else { 1.0 });
    let u = &w - &x;
    let beta = DVector::from_vec(vec![0.5, 0.5]);
    let xrows: Vec<f64> = x.transpose().as_slice().to_vec();
    let y = response(&xrows, 2, &beta, 1.0, seed);
    Ok(GeneratedData {
        dataset: Dataset::new(w, y)?,
        x_true: x,
        u,
        sigma: ErrorCovariance::diagonal(&[sigma_u2, 0.0])?,
        beta_true: beta,
    })
}

pub fn example1_scenario() -> Result<GeneratedData> {
    example1(1, 0.25)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_error_means_w_equals_x() {
        let g = generate(&SimScenario::new(CovariateLaw::Normal, 50, 3, 0.0, 1)).unwrap();
        assert_eq!(g.dataset.w(), &g.x_true);
        assert!(g.sigma.is_zero());
    }

    #[test]
    fn w_minus_x_is_u() {
        let g = generate(&SimScenario::case1(0.4, 3)).unwrap();
        assert_eq!(g.dataset.w() - &g.x_true, g.u);
        assert_eq!(g.sigma.matrix(), &(DMatrix::identity(5, 5) * 0.4));
    }

    #[test]
    fn generation_is_seeded() {
        let s = SimScenario::case2(0.2, 17);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = SimScenario::case2(0.2, 18);
        assert_ne!(generate(&s).unwrap().dataset, generate(&other).unwrap().dataset);
    }

    #[test]
    fn observed_matches_full_generation() {
        let s = SimScenario::case2(0.3, 21);
        assert_eq!(generate_observed(&s).unwrap(), generate(&s).unwrap().dataset);
    }

    #[test]
    fn ar1_builder_exact() {
        let s = ar1_correlation(5, 0.5);
        assert_eq!(s, s.transpose());
        assert!(s.diagonal().iter().all(|&v| v == 1.0));
        assert_eq!(s[(0, 2)], 0.25);
        assert_eq!(s[(4, 0)], 0.0625);
    }

    #[test]
    fn invalid_scenarios() {
        assert!(generate(&SimScenario::new(CovariateLaw::Normal, 2, 3, 0.1, 0)).is_err());
        assert!(generate(&SimScenario::new(CovariateLaw::Normal, 10, 3, -0.1, 0)).is_err());
        let mut s = SimScenario::case1(0.1, 0);
        s.beta_true = Some(vec![1.0]);
        assert!(generate(&s).is_err());
        s.beta_true = None;
        s.noise_var = 0.0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn example1_shape() {
        let g = example1_scenario().unwrap();
        assert_eq!(g.dataset.n(), 1000);
        assert_eq!(g.dataset.p(), 2);
        assert!(g.dataset.w().column(1).iter().all(|&v| v == 1.0));
        assert_eq!(g.sigma.matrix()[(0, 0)], 0.25);
        assert_eq!(g.sigma.matrix()[(1, 1)], 0.0);
    }

    #[test]
    fn replicated_generation() {
        let s = SimScenario::new(CovariateLaw::Normal, 20, 2, 0.3, 4);
        let (rep, x) = generate_replicated(&s, 3).unwrap();
        assert_eq!(rep.common_replication(), Some(3));
        assert_eq!(x.nrows(), 20);
        let first: Vec<&[f64]> = rep.replicates(0).collect();
        assert_ne!(first[0], first[1]);
    }
}
