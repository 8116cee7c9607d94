//! Banded Cholesky for the symmetric positive definite nodal matrix.
//!
//! Storage is row-wise lower band: row `i` holds `A[i][i-bw..=i]`, left
//! padded with zeros for the first `bw` rows.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Adds `v` to `A[i][j]` (and implicitly `A[j][i]`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Multiplies the (unfactored) symmetric matrix by `x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// In-place factorization `A = L Lᵀ`.
    pub fn factor(mut self) -> Result<BandCholesky> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                // L[i][lo..j] · L[j][lo..j]
                let ri = i * w + (lo + bw - i);
                let rj = j * w + (lo + bw - j);
                let len = j - lo;
                let dot: f64 = self.data[ri..ri + len]
                    .iter()
                    .zip(&self.data[rj..rj + len])
                    .map(|(a, b)| a * b)
                    .sum();
                let k = i * w + (j + bw - i);
                let s = self.data[k] - dot;
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Singular { pivot: i });
                    }
                    self.data[k] = s.sqrt();
                } else {
                    self.data[k] = s / self.data[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { m: self })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BandCholesky {
    m: BandMatrix,
}

impl BandCholesky {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw, w) = (self.m.n, self.m.bw, self.m.bw + 1);
        let d = &self.m.data;
        // L y = b
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let row = &d[i * w + (lo + bw - i)..i * w + bw];
            let dot: f64 = row.iter().zip(&b[lo..i]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - dot) / d[i * w + bw];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let xi = b[i] / d[i * w + bw];
            b[i] = xi;
            let lo = i.saturating_sub(bw);
            let row = &d[i * w + (lo + bw - i)..i * w + bw];
            for (bk, l) in b[lo..i].iter_mut().zip(row) {
                *bk -= l * xi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_tridiagonal() {
        // 1-D Laplacian with Dirichlet ends
        let n = 6;
        let mut a = BandMatrix::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b = a.mul(&x_true);
        let f = a.factor().unwrap();
        f.solve_in_place(&mut b);
        for (x, t) in b.iter().zip(&x_true) {
            assert!((x - t).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut a = BandMatrix::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert!(matches!(a.factor(), Err(Error::Singular { pivot: 1 })));
    }

    #[test]
    fn empty_system() {
        let f = BandMatrix::zeros(0, 0).factor().unwrap();
        let mut b: Vec<f64> = vec![];
        f.solve_in_place(&mut b);
        assert!(b.is_empty());
    }
}
