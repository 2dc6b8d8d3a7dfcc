//! Rank-truncated minimum-norm least squares: column-pivoted Householder QR
//! followed by a second QR of the retained rows (complete orthogonal
//! decomposition).

use crate::error::{Error, Result};
use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::householder;
use faer::linalg::solvers::{ColPivQr, Qr};
use faer::{Conj, Mat, MatRef, Par};

pub struct TruncatedQr {
    qr: ColPivQr<f64>,
    // QR of the transposed leading `rank` rows of R, present when columns
    // were dropped.
    cod: Option<Qr<f64>>,
    rank: usize,
    nrows: usize,
    ncols: usize,
}

impl TruncatedQr {
    /// Factors `a` and keeps the leading columns whose `|R_kk|` exceeds
    /// `rel_tol · |R_00|`.
    pub fn new(a: MatRef<'_, f64>, rel_tol: f64) -> Result<Self> {
        let (nrows, ncols) = a.shape();
        let qr = ColPivQr::new(a);
        let r = qr.R();
        let size = nrows.min(ncols);
        let r00 = if size > 0 { r[(0, 0)].abs() } else { 0.0 };
        if !(r00.is_finite() && r00 > 0.0) {
            return Err(Error::Factorization { condition: f64::INFINITY });
        }
        let mut rank = 0;
        while rank < size && r[(rank, rank)].abs() > rel_tol * r00 {
            rank += 1;
        }
        let cod = (rank < ncols).then(|| {
            let t = Mat::<f64>::from_fn(ncols, rank, |i, j| if i >= j { r[(j, i)] } else { 0.0 });
            Qr::new(t.as_ref())
        });
        let this = TruncatedQr { qr, cod, rank, nrows, ncols };
        let cond = this.condition_estimate();
        if !cond.is_finite() {
            return Err(Error::Factorization { condition: cond });
        }
        Ok(this)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `|R_00| / |R_rr|` over the retained block.
    pub fn condition_estimate(&self) -> f64 {
        let r = self.qr.R();
        r[(0, 0)].abs() / r[(self.rank - 1, self.rank - 1)].abs()
    }

    /// Minimum-norm solution of `min ‖Ax − b‖` for the rank-truncated `A`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.nrows);
        let mut rhs = Mat::<f64>::from_fn(self.nrows, 1, |i, _| b[i]);
        let basis = self.qr.Q_basis();
        let coeff = self.qr.Q_coeff();
        let mut mem = MemBuffer::new(
            householder::apply_block_householder_sequence_transpose_on_the_left_in_place_scratch::<f64>(
                self.nrows,
                coeff.nrows(),
                1,
            ),
        );
        householder::apply_block_householder_sequence_transpose_on_the_left_in_place_with_conj(
            basis,
            coeff,
            Conj::No,
            rhs.as_mut(),
            Par::Seq,
            MemStack::new(&mut mem),
        );
        let r = self.qr.R();
        let mut z = vec![0.0; self.ncols];
        match &self.cod {
            None => {
                for i in (0..self.rank).rev() {
                    let mut s = rhs[(i, 0)];
                    for (j, zj) in z.iter().enumerate().take(self.rank).skip(i + 1) {
                        s -= r[(i, j)] * zj;
                    }
                    z[i] = s / r[(i, i)];
                }
            }
            Some(cod) => {
                // [R11 R12] = L Zᵀ with L = R2ᵀ lower triangular; solve L w = c, z = Z w.
                let r2 = cod.R();
                let mut w = Mat::<f64>::zeros(self.ncols, 1);
                for i in 0..self.rank {
                    let mut s = rhs[(i, 0)];
                    for j in 0..i {
                        s -= r2[(j, i)] * w[(j, 0)];
                    }
                    w[(i, 0)] = s / r2[(i, i)];
                }
                let (basis, coeff) = (cod.Q_basis(), cod.Q_coeff());
                let mut mem = MemBuffer::new(
                    householder::apply_block_householder_sequence_on_the_left_in_place_scratch::<f64>(
                        self.ncols,
                        coeff.nrows(),
                        1,
                    ),
                );
                householder::apply_block_householder_sequence_on_the_left_in_place_with_conj(
                    basis,
                    coeff,
                    Conj::No,
                    w.as_mut(),
                    Par::Seq,
                    MemStack::new(&mut mem),
                );
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi = w[(i, 0)];
                }
            }
        }
        let perm = self.qr.P().arrays().0;
        let mut x = vec![0.0; self.ncols];
        for (k, &p) in perm.iter().enumerate() {
            x[p] = z[k];
        }
        x
    }
}

/// `y = A x` for a dense faer matrix.
pub fn mat_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let (m, n) = a.shape();
    let mut y = vec![0.0; m];
    for j in 0..n {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let col = a.col(j);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += col[i] * xj;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(i: usize, j: usize) -> f64 {
        ((i as f64 * 12.9898 + j as f64 * 78.233).sin() * 43758.5453).fract()
    }

    #[test]
    fn full_rank_square_solve() {
        let n = 40;
        let a = Mat::<f64>::from_fn(n, n, |i, j| pseudo_random(i, j) + if i == j { 3.0 } else { 0.0 });
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = mat_vec(a.as_ref(), &x_true);
        let qr = TruncatedQr::new(a.as_ref(), 1e-14).unwrap();
        assert_eq!(qr.rank(), n);
        let x = qr.solve(&b);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn overdetermined_least_squares_normal_equations() {
        let (m, n) = (30, 12);
        let a = Mat::<f64>::from_fn(m, n, |i, j| pseudo_random(i, j));
        let b: Vec<f64> = (0..m).map(|i| (i as f64).cos()).collect();
        let x = TruncatedQr::new(a.as_ref(), 1e-14).unwrap().solve(&b);
        let r: Vec<f64> = mat_vec(a.as_ref(), &x).iter().zip(&b).map(|(u, v)| u - v).collect();
        for j in 0..n {
            let g: f64 = (0..m).map(|i| a[(i, j)] * r[i]).sum();
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_system_is_truncated() {
        let (m, n) = (20, 10);
        let mut a = Mat::<f64>::from_fn(m, n, |i, j| pseudo_random(i, j));
        for i in 0..m {
            a[(i, 9)] = a[(i, 0)] + 2.0 * a[(i, 3)];
        }
        let x_true: Vec<f64> = (0..n).map(|i| if i == 9 { 0.0 } else { 1.0 + i as f64 }).collect();
        let b = mat_vec(a.as_ref(), &x_true);
        let qr = TruncatedQr::new(a.as_ref(), 1e-12).unwrap();
        assert_eq!(qr.rank(), 9);
        let x = qr.solve(&b);
        let res: f64 = mat_vec(a.as_ref(), &x).iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum();
        assert!(res.sqrt() < 1e-12);
    }

    #[test]
    fn rank_deficient_solution_has_minimum_norm() {
        // Two identical columns: the minimum-norm solution splits the weight evenly.
        let m = 12;
        let mut a = Mat::<f64>::from_fn(m, 4, |i, j| pseudo_random(i, j));
        for i in 0..m {
            a[(i, 3)] = a[(i, 1)];
        }
        let b = mat_vec(a.as_ref(), &[1.0, 2.0, -1.0, 0.0]);
        let x = TruncatedQr::new(a.as_ref(), 1e-12).unwrap().solve(&b);
        for (u, v) in x.iter().zip([1.0, 1.0, -1.0, 1.0]) {
            assert!((u - v).abs() < 1e-12, "{x:?}");
        }
    }

    #[test]
    fn zero_matrix_fails() {
        let a = Mat::<f64>::zeros(5, 5);
        assert!(TruncatedQr::new(a.as_ref(), 1e-14).is_err());
    }
}
