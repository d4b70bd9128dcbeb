//! Dense helpers shared by the estimators: cascade (pairwise) summation of
//! row moments, an LU factorization with a 1-norm condition estimate, and a
//! PSD projection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{EivError, Result};

/// Systems whose reciprocal condition estimate falls below this are rejected.
pub const RCOND_THRESHOLD: f64 = 1e-12;

const BLOCK_ROWS: usize = 256;

/// How a numerically singular corrected system is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SingularPolicy {
    #[default]
    Fail,
    /// Add `1e-8 * trace / p` to the diagonal and retry once.
    Ridge,
}

/// Pairwise sum of a slice.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Kahan-Babuska (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.carry += (self.sum - t) + value;
        } else {
            self.carry += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::default();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Binary-counter cascade: partial sums of equal "height" are merged, so the
/// result matches a balanced pairwise tree while holding only O(log n) partials.
struct Cascade {
    stack: Vec<(u32, DMatrix<f64>, DVector<f64>)>,
}

impl Cascade {
    fn new() -> Self {
        Cascade { stack: Vec::new() }
    }

    fn push(&mut self, gram: DMatrix<f64>, cross: DVector<f64>) {
        let mut level = 0u32;
        let mut gram = gram;
        let mut cross = cross;
        while let Some((top, _, _)) = self.stack.last() {
            if *top != level {
                break;
            }
            let (_, g, c) = self.stack.pop().expect("non-empty");
            gram += g;
            cross += c;
            level += 1;
        }
        self.stack.push((level, gram, cross));
    }

    fn finish(mut self, p: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut gram = DMatrix::zeros(p, p);
        let mut cross = DVector::zeros(p);
        // Smallest partials first.
        while let Some((_, g, c)) = self.stack.pop() {
            gram += g;
            cross += c;
        }
        (gram, cross)
    }
}

/// Rows participating in a moment accumulation.
#[derive(Debug, Clone, Copy)]
pub enum Rows<'a> {
    All,
    Subset(&'a [usize]),
}

impl Rows<'_> {
    fn len(&self, n: usize) -> usize {
        match self {
            Rows::All => n,
            Rows::Subset(idx) => idx.len(),
        }
    }
}

/// Returns `(Σ c_k W_k W_kᵀ, Σ c_k W_k y_k)` over the selected rows, where `c_k`
/// is the k-th entry of `weights` (1 when absent). Blocks of rows go through
/// GEMM; block results are combined by cascade summation.
pub fn weighted_moments(
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    rows: Rows<'_>,
    weights: Option<&[f64]>,
) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = w.shape();
    let count = rows.len(n);
    if let Some(c) = weights {
        assert_eq!(c.len(), count, "one weight per selected row");
    }
    let mut cascade = Cascade::new();
    let mut start = 0;
    while start < count {
        let b = BLOCK_ROWS.min(count - start);
        match (rows, weights) {
            (Rows::All, None) => {
                let block = w.rows(start, b);
                let yb = y.rows(start, b);
                cascade.push(block.tr_mul(&block), block.tr_mul(&yb));
            }
            _ => {
                let row_of = |k: usize| match rows {
                    Rows::All => start + k,
                    Rows::Subset(idx) => idx[start + k],
                };
                let block = DMatrix::from_fn(b, p, |k, j| w[(row_of(k), j)]);
                let scale = |k: usize| weights.map_or(1.0, |c| c[start + k]);
                let scaled = DMatrix::from_fn(b, p, |k, j| block[(k, j)] * scale(k));
                let yb = DVector::from_fn(b, |k, _| y[row_of(k)]);
                cascade.push(block.tr_mul(&scaled), scaled.tr_mul(&yb));
            }
        }
        start += b;
    }
    cascade.finish(p)
}

/// Makes a matrix exactly symmetric by averaging with its transpose.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Clips negative eigenvalues of a symmetric matrix to zero. The flag reports
/// whether any clipping happened.
pub fn project_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return (sym, false);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    (symmetrize(&out), true)
}

/// LU factorization with partial pivoting, stored row-major.
#[derive(Debug, Clone)]
pub struct LuFactor {
    dim: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    norm1: f64,
    singular: bool,
}

impl LuFactor {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let dim = a.nrows();
        assert_eq!(dim, a.ncols(), "LU needs a square matrix");
        let norm1 = (0..dim)
            .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut lu = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                lu[i * dim + j] = a[(i, j)];
            }
        }
        let mut perm: Vec<usize> = (0..dim).collect();
        let mut singular = false;
        for k in 0..dim {
            let (pivot_row, pivot_abs) = (k..dim)
                .map(|i| (i, lu[i * dim + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs == 0.0 || !pivot_abs.is_finite() {
                singular = true;
                continue;
            }
            if pivot_row != k {
                for j in 0..dim {
                    lu.swap(k * dim + j, pivot_row * dim + j);
                }
                perm.swap(k, pivot_row);
            }
            let pivot = lu[k * dim + k];
            let (upper, lower) = lu.split_at_mut((k + 1) * dim);
            let row_k = &upper[k * dim..(k + 1) * dim];
            for row in lower.chunks_exact_mut(dim) {
                let factor = row[k] / pivot;
                row[k] = factor;
                if factor != 0.0 {
                    for j in (k + 1)..dim {
                        row[j] -= factor * row_k[j];
                    }
                }
            }
        }
        LuFactor {
            dim,
            lu,
            perm,
            norm1,
            singular,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        debug_assert_eq!(b.len(), n);
        let permuted: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        b.copy_from_slice(&permuted);
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, x)| l * x).sum();
            b[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            let s: f64 = row[i + 1..].iter().zip(&b[i + 1..]).map(|(u, x)| u * x).sum();
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `Aᵀ x = b` in place.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        // Uᵀ z = b
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lu[k * n + i] * b[k];
            }
            b[i] = s / self.lu[i * n + i];
        }
        // Lᵀ w = z
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.lu[k * n + i] * b[k];
            }
            b[i] = s;
        }
        let mut out = vec![0.0; n];
        for (k, &i) in self.perm.iter().enumerate() {
            out[i] = b[k];
        }
        b.copy_from_slice(&out);
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.as_slice().to_vec();
        self.solve_in_place(&mut x);
        DVector::from_vec(x)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let mut x: Vec<f64> = col.iter().copied().collect();
            self.solve_in_place(&mut x);
            col.copy_from_slice(&x);
        }
        out
    }

    /// Reciprocal 1-norm condition estimate (Hager's method with Higham's
    /// alternating-sign safeguard). Zero for an exactly singular factor.
    pub fn rcond(&self) -> f64 {
        if self.singular || self.norm1 == 0.0 {
            return 0.0;
        }
        let n = self.dim;
        let mut x = vec![1.0 / n as f64; n];
        let mut estimate = 0.0;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let mut y = x.clone();
            self.solve_in_place(&mut y);
            estimate = y.iter().map(|v| v.abs()).sum::<f64>();
            let mut z: Vec<f64> = y.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
            self.solve_transpose_in_place(&mut z);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(j, v)| (j, v.abs()))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx || j == last_j {
                break;
            }
            last_j = j;
            x.iter_mut().for_each(|v| *v = 0.0);
            x[j] = 1.0;
        }
        let mut alt: Vec<f64> = (0..n)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * (1.0 + i as f64 / (n.max(2) - 1) as f64)
            })
            .collect();
        self.solve_in_place(&mut alt);
        let alt_est = 2.0 * alt.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
        let inv_norm = estimate.max(alt_est);
        if !inv_norm.is_finite() || inv_norm == 0.0 {
            return 0.0;
        }
        1.0 / (self.norm1 * inv_norm)
    }
}

/// A factored square system that passed the conditioning check.
#[derive(Debug, Clone)]
pub struct CheckedSystem {
    pub lu: LuFactor,
    pub rcond: f64,
    pub ridge: f64,
}

/// Factors `matrix`, rejecting it (or ridging it, per `policy`) when its
/// reciprocal condition estimate is below [`RCOND_THRESHOLD`].
pub fn factor_checked(
    matrix: &DMatrix<f64>,
    label: &'static str,
    policy: SingularPolicy,
) -> Result<CheckedSystem> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(EivError::Singular {
            matrix: label,
            rcond: 0.0,
        });
    }
    let lu = LuFactor::new(matrix);
    let rcond = lu.rcond();
    if rcond >= RCOND_THRESHOLD {
        return Ok(CheckedSystem {
            lu,
            rcond,
            ridge: 0.0,
        });
    }
    if policy == SingularPolicy::Ridge {
        let p = matrix.nrows();
        let eps = 1e-8 * matrix.trace().abs() / p as f64;
        let ridged = matrix + DMatrix::identity(p, p) * eps;
        let lu = LuFactor::new(&ridged);
        let rcond_ridged = lu.rcond();
        if rcond_ridged >= RCOND_THRESHOLD {
            log::warn!("{label} ill-conditioned (rcond {rcond:.3e}); ridge {eps:.3e} applied");
            return Ok(CheckedSystem {
                lu,
                rcond: rcond_ridged,
                ridge: eps,
            });
        }
    }
    Err(EivError::Singular {
        matrix: label,
        rcond,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn inverse_by_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
        let lu = LuFactor::new(a);
        lu.solve_matrix(&DMatrix::identity(a.nrows(), a.ncols()))
    }

    #[test]
    fn lu_solves_and_transposed_solves() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 4.0]);
        let lu = LuFactor::new(&a);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = lu.solve(&b);
        assert_relative_eq!((&a * &x - &b).norm(), 0.0, epsilon = 1e-13);

        let mut xt = b.as_slice().to_vec();
        lu.solve_transpose_in_place(&mut xt);
        let xt = DVector::from_vec(xt);
        assert_relative_eq!((a.transpose() * xt - &b).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn rcond_tracks_exact_condition_number() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let inv = inverse_by_columns(&a);
        let norm1 = |m: &DMatrix<f64>| {
            (0..m.ncols())
                .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max)
        };
        let exact = 1.0 / (norm1(&a) * norm1(&inv));
        let est = LuFactor::new(&a).rcond();
        // Hager's estimate never overestimates ‖A⁻¹‖₁ and is exact on small cases.
        assert!(est >= exact * (1.0 - 1e-12));
        assert!(est <= exact * 3.0);
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let err = factor_checked(&a, "test matrix", SingularPolicy::Fail).unwrap_err();
        assert!(matches!(err, EivError::Singular { matrix: "test matrix", .. }));
    }

    #[test]
    fn ridge_policy_rescues_rank_deficient_psd() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let sys = factor_checked(&a, "test matrix", SingularPolicy::Ridge).unwrap();
        assert_relative_eq!(sys.ridge, 1e-8, epsilon = 1e-20);
    }

    #[test]
    fn moments_blocked_match_naive() {
        let n = 1000;
        let w = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 13) % 17) as f64 / 3.0 - 2.0);
        let y = DVector::from_fn(n, |i, _| (i % 5) as f64);
        let (g, c) = weighted_moments(&w, &y, Rows::All, None);
        let g_naive = w.transpose() * &w;
        let c_naive = w.transpose() * &y;
        assert_relative_eq!(g, g_naive, epsilon = 1e-9);
        assert_relative_eq!(c, c_naive, epsilon = 1e-9);

        let idx: Vec<usize> = (0..700).map(|k| (k * 31) % n).collect();
        let wts: Vec<f64> = (0..700).map(|k| 1.0 + (k % 3) as f64).collect();
        let (g, c) = weighted_moments(&w, &y, Rows::Subset(&idx), Some(&wts));
        let mut g_naive = DMatrix::zeros(3, 3);
        let mut c_naive = DVector::zeros(3);
        for (k, &i) in idx.iter().enumerate() {
            let row = w.row(i).transpose();
            g_naive += &row * row.transpose() * wts[k];
            c_naive += &row * (y[i] * wts[k]);
        }
        assert_relative_eq!(g, g_naive, epsilon = 1e-9);
        assert_relative_eq!(c, c_naive, epsilon = 1e-9);
    }

    #[test]
    fn psd_projection_clips_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (p, clipped) = project_psd(&m);
        assert!(clipped);
        let eig = SymmetricEigen::new(p).eigenvalues;
        assert!(eig.iter().all(|&l| l > -1e-12));
        let (_, clipped) = project_psd(&DMatrix::identity(2, 2));
        assert!(!clipped);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedSum::default();
        acc.add(1e16);
        for _ in 0..10 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 10.0);
        assert_eq!(pairwise_sum(&[0.5; 1000]), 500.0);
    }
}
