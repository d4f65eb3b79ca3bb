//! Dense helpers and a symmetric band matrix with Cholesky factorization.
//!
//! The SPDE precision matrices are banded (bandwidth 1 in 1D, `2 (nx + 1)` in
//! 2D), so they are stored by lower diagonals and factorized in
//! `O(n * bw^2)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric matrix with `A[i][j] = 0` whenever `|i - j| > bw`.
///
/// Only the lower triangle is stored: row `i` holds `A[i][i - k]` for
/// `k = 0..=bw` at offset `i * (bw + 1) + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandedSym {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut out = Self::zeros(diag.len(), 0);
        out.data.copy_from_slice(diag);
        out
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let k = hi - lo;
        (k <= self.bw).then(|| hi * (self.bw + 1) + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` to the symmetric pair `(i, j)` / `(j, i)`.
    ///
    /// Panics if the entry lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside bandwidth {}", self.bw));
        self.data[s] += v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * (self.bw + 1)]).collect()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = DVector::zeros(self.n);
        let w = self.bw + 1;
        for i in 0..self.n {
            let row = &self.data[i * w..(i + 1) * w];
            y[i] += row[0] * x[i];
            for k in 1..w.min(i + 1) {
                let a = row[k];
                if a != 0.0 {
                    y[i] += a * x[i - k];
                    y[i - k] += a * x[i];
                }
            }
        }
        y
    }

    /// `x^T A x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        self.mul_vec(x).dot(x)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in 0..=self.bw.min(i) {
                let v = self.data[i * (self.bw + 1) + k];
                out[(i, i - k)] = v;
                out[(i - k, i)] = v;
            }
        }
        out
    }

    /// `sum_t coeff_t * A_t`, with the widest band among the terms.
    pub fn linear_combination(terms: &[(f64, &BandedSym)]) -> Self {
        let n = terms[0].1.n;
        let bw = terms.iter().map(|(_, a)| a.bw).max().unwrap_or(0);
        let mut out = Self::zeros(n, bw);
        for &(c, a) in terms {
            assert_eq!(a.n, n);
            for i in 0..n {
                for k in 0..=a.bw.min(i) {
                    out.data[i * (bw + 1) + k] += c * a.data[i * (a.bw + 1) + k];
                }
            }
        }
        out
    }

    /// `A diag(d) A`, which has twice the bandwidth of `A`.
    #[allow(clippy::needless_range_loop)]
    pub fn sandwich_diag(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.n);
        let bw2 = 2 * self.bw;
        let mut out = Self::zeros(self.n, bw2);
        for i in 0..self.n {
            let lo = i.saturating_sub(bw2);
            for j in lo..=i {
                // sum over l within band of both i and j
                let l_lo = i.saturating_sub(self.bw);
                let l_hi = (j + self.bw).min(self.n - 1);
                let mut s = 0.0;
                for l in l_lo..=l_hi {
                    s += self.get(i, l) * d[l] * self.get(l, j);
                }
                out.data[i * (bw2 + 1) + (i - j)] = s;
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            bw: self.bw,
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = self.data[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Factorization(format!(
                            "matrix not positive definite at pivot {i} (value {s:e})"
                        )));
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        Ok(BandedCholesky { n, bw, l })
    }
}

/// Lower-triangular band factor `L` with `A = L L^T`.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn at(&self, i: usize, k: usize) -> f64 {
        self.l[i * (self.bw + 1) + k]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.at(i, 0).ln()).sum::<f64>()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, x: &mut [f64]) {
        for i in 0..self.n {
            let mut s = x[i];
            for k in 1..=self.bw.min(i) {
                s -= self.at(i, k) * x[i - k];
            }
            x[i] = s / self.at(i, 0);
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn solve_upper_in_place(&self, x: &mut [f64]) {
        for i in (0..self.n).rev() {
            x[i] /= self.at(i, 0);
            let xi = x[i];
            for k in 1..=self.bw.min(i) {
                x[i - k] -= self.at(i, k) * xi;
            }
        }
    }

    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_upper_in_place(x.as_mut_slice());
        x
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(x.as_mut_slice());
        self.solve_upper_in_place(x.as_mut_slice());
        x
    }

    /// Solves `L X = B` column by column.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_lower_in_place(col.as_mut_slice());
        }
        x
    }

    /// Solves `L^T X = B` column by column.
    pub fn solve_upper_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_upper_in_place(col.as_mut_slice());
        }
        x
    }

    /// `L x`.
    pub fn mul_lower(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| {
            (0..=self.bw.min(i)).map(|k| self.at(i, k) * x[i - k]).sum()
        })
    }

    /// `L^T x`.
    pub fn mul_upper(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            for k in 0..=self.bw.min(i) {
                y[i - k] += self.at(i, k) * x[i];
            }
        }
        y
    }

    /// `L^T X` for a dense matrix.
    pub fn mul_upper_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            for i in 0..self.n {
                let xi = x[(i, c)];
                if xi == 0.0 {
                    continue;
                }
                for k in 0..=self.bw.min(i) {
                    y[(i - k, c)] += self.at(i, k) * xi;
                }
            }
        }
        y
    }
}

/// Sign and log-magnitude of a dense determinant via partial-pivot LU.
pub fn signed_log_det(m: DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (1.0, 0.0);
    }
    let lu = m.lu();
    let mut sign: f64 = lu.p().determinant();
    let mut log_abs = 0.0;
    for d in lu.u().diagonal().iter() {
        if *d == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        sign *= d.signum();
        log_abs += d.abs().ln();
    }
    (sign, log_abs)
}

/// Numerically stable `log(mean(exp(x)))`.
pub fn log_mean_exp(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + (s / x.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd_band(n: usize, bw: usize, seed: u64) -> BandedSym {
        let mut a = BandedSym::zeros(n, bw);
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for i in 0..n {
            for k in 1..=bw.min(i) {
                a.add(i, i - k, next());
            }
            a.add(i, i, 2.0 * bw as f64 + 1.0);
        }
        a
    }

    #[test]
    fn cholesky_matches_dense() {
        let a = random_spd_band(30, 4, 7);
        let dense = a.to_dense();
        let chol = a.cholesky().unwrap();
        let dchol = dense.clone().cholesky().unwrap();
        assert!((chol.log_det() - 2.0 * dchol.l().diagonal().map(f64::ln).sum()).abs() < 1e-10);
        let b = DVector::from_fn(30, |i, _| (i as f64).sin());
        let x = chol.solve(&b);
        assert!((&dense * &x - &b).norm() < 1e-10);
        let y = chol.solve_upper(&chol.solve_lower(&b));
        assert!((x - y).norm() < 1e-12);
        // L L^T x == A x
        let z = chol.mul_lower(&chol.mul_upper(&b));
        assert!((z - a.mul_vec(&b)).norm() < 1e-10);
    }

    #[test]
    fn sandwich_matches_dense() {
        let a = random_spd_band(12, 2, 3);
        let d: Vec<f64> = (0..12).map(|i| 1.0 + i as f64 * 0.1).collect();
        let s = a.sandwich_diag(&d);
        let dense = a.to_dense() * DMatrix::from_diagonal(&DVector::from_vec(d)) * a.to_dense();
        assert!((s.to_dense() - dense).amax() < 1e-12);
        assert_eq!(s.bandwidth(), 4);
    }

    #[test]
    fn not_positive_definite_is_reported() {
        let mut a = BandedSym::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert!(matches!(a.cholesky(), Err(Error::Factorization(_))));
    }

    #[test]
    fn signed_log_det_tracks_sign() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 3.0, 0.0]);
        let (s, l) = signed_log_det(m);
        assert_eq!(s, -1.0);
        assert!((l - 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[1000.0, 1000.0]) - 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]) - 1.5f64.ln()).abs() < 1e-14);
    }
}
