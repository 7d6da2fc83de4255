//! Dense SVD via one-sided Jacobi rotations.
//!
//! One-sided Jacobi orthogonalizes the columns of the working matrix by
//! plane rotations, which gives small singular values with high relative
//! accuracy and is fully deterministic (fixed sweep order, no RNG). That is
//! what the bound computations need: the Eckart-Young residual norm comes
//! straight out of the factorization.

use crate::error::{Error, Result};
use crate::linalg::matrix::{norm2, Matrix};
use serde::{Deserialize, Serialize};

/// Rank-r SVD factors of a matrix plus the first discarded singular value.
///
/// `u` is m x r, `v` is n x r (both with orthonormal columns), `s` holds the
/// leading r singular values in non-increasing order, and `sigma_next` is
/// sigma_{r+1} (zero when r = min(m, n)). By Eckart-Young, `sigma_next` is
/// the spectral norm of the reconstruction residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
    pub sigma_next: f64,
}

impl SvdFactors {
    /// Applies the truncated map: U S V^T x.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.v.matvec_t(x);
        for (ti, si) in t.iter_mut().zip(&self.s) {
            *ti *= si;
        }
        self.u.matvec(&t)
    }

    /// Dense reconstruction U S V^T.
    pub fn reconstruct(&self) -> Matrix {
        let m = self.u.rows();
        let n = self.v.rows();
        let r = self.s.len();
        let mut out = Matrix::zeros(m, n);
        for k in 0..r {
            let sk = self.s[k];
            if sk == 0.0 {
                continue;
            }
            for i in 0..m {
                let uik = self.u[(i, k)] * sk;
                if uik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += uik * self.v[(j, k)];
                }
            }
        }
        out
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

/// Full SVD, singular values in non-increasing order. Returns (U, S, V) with
/// U m x p, V n x p, p = min(m, n), and A = U diag(S) V^T.
pub fn full_svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if a.is_empty() {
        return Err(Error::invalid("SVD of an empty matrix"));
    }
    if a.rows() >= a.cols() {
        jacobi_svd_tall(a)
    } else {
        // Work on the transpose and swap the factor roles.
        let (v, s, u) = jacobi_svd_tall(&a.transpose())?;
        Ok((u, s, v))
    }
}

/// Rank-r truncation of the SVD. `sigma_next` is sigma_{r+1} of the input
/// (0 when r = min(m, n)), so `||a - U S V^T||_2 = sigma_next`.
pub fn truncated_svd(a: &Matrix, r: usize) -> Result<SvdFactors> {
    let p = a.rows().min(a.cols());
    if r == 0 || r > p {
        return Err(Error::RankOutOfRange { rank: r, max: p });
    }
    let (u, s, v) = full_svd(a)?;
    let sigma_next = if r < p { s[r] } else { 0.0 };
    let mut ur = Matrix::zeros(a.rows(), r);
    let mut vr = Matrix::zeros(a.cols(), r);
    for k in 0..r {
        for i in 0..a.rows() {
            ur[(i, k)] = u[(i, k)];
        }
        for j in 0..a.cols() {
            vr[(j, k)] = v[(j, k)];
        }
    }
    Ok(SvdFactors {
        u: ur,
        s: s[..r].to_vec(),
        v: vr,
        sigma_next,
    })
}

const MAX_SWEEPS: usize = 60;

/// One-sided Jacobi on a tall (m >= n) matrix.
fn jacobi_svd_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let m = a.rows();
    let n = a.cols();
    debug_assert!(m >= n);

    // Column-major working copy: columns are contiguous for the rotations.
    let mut work: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = f64::EPSILON;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = column_moments(&work[p], &work[q]);
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut work, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    // Singular values are the column norms; sort descending (stable).
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = work.iter().map(|col| norm2(col)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let scale = norms[order[0]].max(1.0);
    let mut filled = 0usize;
    for (k, &idx) in order.iter().enumerate() {
        let sigma = norms[idx];
        s.push(sigma);
        if sigma > scale * 1e-300 {
            for i in 0..m {
                u[(i, k)] = work[idx][i] / sigma;
            }
            filled = k + 1;
        }
        for j in 0..n {
            vm[(j, k)] = v[idx][j];
        }
    }

    // Zero singular values leave their U columns undefined; complete them to
    // an orthonormal basis deterministically from standard basis vectors.
    if filled < n {
        complete_orthonormal(&mut u, filled, n);
    }

    Ok((u, s, vm))
}

fn column_moments(cp: &[f64], cq: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&x, &y) in cp.iter().zip(cq.iter()) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    // Split borrow of two distinct columns.
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills columns `from..n` of `u` with unit vectors orthogonal to the
/// existing ones, via Gram-Schmidt over the standard basis.
fn complete_orthonormal(u: &mut Matrix, from: usize, n: usize) {
    let m = u.rows();
    let mut next = from;
    let mut basis_idx = 0usize;
    while next < n && basis_idx < m {
        let mut cand = vec![0.0; m];
        cand[basis_idx] = 1.0;
        basis_idx += 1;
        for k in 0..next {
            let proj: f64 = (0..m).map(|i| u[(i, k)] * cand[i]).sum();
            for i in 0..m {
                cand[i] -= proj * u[(i, k)];
            }
        }
        let norm = norm2(&cand);
        if norm > 1e-8 {
            for i in 0..m {
                u[(i, next)] = cand[i] / norm;
            }
            next += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct_full(u: &Matrix, s: &[f64], v: &Matrix) -> Matrix {
        let f = SvdFactors {
            u: u.clone(),
            s: s.to_vec(),
            v: v.clone(),
            sigma_next: 0.0,
        };
        f.reconstruct()
    }

    #[test]
    fn diagonal_singular_values() {
        let a = Matrix::diag(&[5.0, 2.0, 1.0]);
        let (_, s, _) = full_svd(&a).unwrap();
        assert!((s[0] - 5.0).abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_residual_is_sigma_next() {
        let a = Matrix::diag(&[5.0, 2.0, 1.0]);
        let f = truncated_svd(&a, 2).unwrap();
        assert!((f.sigma_next - 1.0).abs() < 1e-12);
        let resid = a.sub(&f.reconstruct());
        // Residual of the diagonal truncation is diag(0, 0, 1).
        assert!((resid[(2, 2)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_truncation_is_exact() {
        let a = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = truncated_svd(&a, 2).unwrap();
        assert_eq!(f.sigma_next, 0.0);
        let err = a.sub(&f.reconstruct()).max_abs();
        assert!(err < 1e-12, "reconstruction error {err}");
    }

    #[test]
    fn wide_matrix_round_trip() {
        let a = Matrix::new(2, 4, vec![1.0, -2.0, 0.5, 3.0, 4.0, 0.0, -1.0, 2.0]).unwrap();
        let (u, s, v) = full_svd(&a).unwrap();
        let err = a.sub(&reconstruct_full(&u, &s, &v)).max_abs();
        assert!(err < 1e-12, "reconstruction error {err}");
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn orthonormal_columns_with_rank_deficiency() {
        // Rank 1 matrix: second and third singular values are zero, U must
        // still have orthonormal columns.
        let a = Matrix::new(3, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0]).unwrap();
        let (u, s, v) = full_svd(&a).unwrap();
        assert!(s[1].abs() < 1e-10 && s[2].abs() < 1e-10);
        for p in 0..3 {
            for q in 0..3 {
                let want = if p == q { 1.0 } else { 0.0 };
                let du: f64 = (0..3).map(|i| u[(i, p)] * u[(i, q)]).sum();
                let dv: f64 = (0..3).map(|i| v[(i, p)] * v[(i, q)]).sum();
                assert!((du - want).abs() < 1e-10, "U^TU[{p}{q}] = {du}");
                assert!((dv - want).abs() < 1e-10, "V^TV[{p}{q}] = {dv}");
            }
        }
    }

    #[test]
    fn rank_out_of_range() {
        let a = Matrix::identity(3);
        assert!(matches!(
            truncated_svd(&a, 0),
            Err(Error::RankOutOfRange { .. })
        ));
        assert!(matches!(
            truncated_svd(&a, 4),
            Err(Error::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn apply_matches_reconstruct() {
        let a = Matrix::new(3, 2, vec![1.0, 2.0, -3.0, 0.5, 2.5, -1.0]).unwrap();
        let f = truncated_svd(&a, 1).unwrap();
        let x = vec![0.7, -1.3];
        let via_apply = f.apply(&x);
        let via_dense = f.reconstruct().matvec(&x);
        for (a, b) in via_apply.iter().zip(via_dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
