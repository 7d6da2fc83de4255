//! Symmetric eigendecomposition (cyclic Jacobi) and matrix square roots.

use crate::error::{Error, Result};
use crate::linalg::matrix::Matrix;

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 60;

/// Eigendecomposition of a symmetric matrix: returns (eigenvalues, Q) with
/// eigenvalues in non-increasing order and S = Q diag(l) Q^T.
pub fn sym_eigen(s: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    check_symmetric(s)?;
    let n = s.rows();
    let mut a = s.clone();
    // Symmetrize exactly so the rotations see a_pq == a_qp.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut q = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a[(i, j)].abs());
            }
        }
        let scale = a.max_abs().max(1.0);
        if off <= f64::EPSILON * scale {
            break;
        }
        for p in 0..n {
            for qi in (p + 1)..n {
                let apq = a[(p, qi)];
                if apq.abs() <= f64::EPSILON * scale * 1e-2 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(qi, qi)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                apply_jacobi_rotation(&mut a, p, qi, c, sn);
                for i in 0..n {
                    let qip = q[(i, p)];
                    let qiq = q[(i, qi)];
                    q[(i, p)] = c * qip - sn * qiq;
                    q[(i, qi)] = sn * qip + c * qiq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap().then(i.cmp(&j)));

    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (k, &idx) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, k)] = q[(i, idx)];
        }
    }
    Ok((values, vectors))
}

fn apply_jacobi_rotation(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for i in 0..n {
        if i != p && i != q {
            let aip = a[(i, p)];
            let aiq = a[(i, q)];
            a[(i, p)] = c * aip - s * aiq;
            a[(p, i)] = a[(i, p)];
            a[(i, q)] = s * aip + c * aiq;
            a[(q, i)] = a[(i, q)];
        }
    }
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    let apq = a[(p, q)];
    a[(p, p)] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
    a[(q, q)] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
}

/// Square root and inverse square root of a symmetric PSD matrix.
///
/// Eigenvalues below `floor` contribute zero to the inverse part, so
/// S^{1/2} S^{-1/2} is the orthogonal projector onto the non-floored
/// eigenspace. Small negative eigenvalues (PSD up to round-off) are clamped
/// to zero before the square root.
pub fn sym_inv_sqrt(s: &Matrix, floor: f64) -> Result<(Matrix, Matrix)> {
    let (values, q) = sym_eigen(s)?;
    let n = s.rows();
    let mut sqrt_m = Matrix::zeros(n, n);
    let mut inv_sqrt_m = Matrix::zeros(n, n);
    for k in 0..n {
        let lam = values[k];
        let sq = lam.max(0.0).sqrt();
        let inv = if lam >= floor { 1.0 / lam.sqrt() } else { 0.0 };
        if sq == 0.0 && inv == 0.0 {
            continue;
        }
        for i in 0..n {
            let qik = q[(i, k)];
            if qik == 0.0 {
                continue;
            }
            for j in 0..n {
                let qjk = q[(j, k)];
                sqrt_m[(i, j)] += sq * qik * qjk;
                inv_sqrt_m[(i, j)] += inv * qik * qjk;
            }
        }
    }
    Ok((sqrt_m, inv_sqrt_m))
}

fn check_symmetric(s: &Matrix) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(Error::dims(
            "sym_eigen",
            "square matrix",
            format!("{}x{}", s.rows(), s.cols()),
        ));
    }
    let mut max_asym = 0.0f64;
    for i in 0..s.rows() {
        for j in (i + 1)..s.cols() {
            max_asym = max_asym.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            max_asym,
            tol: SYMMETRY_TOL,
        });
    }
    Ok(())
}
