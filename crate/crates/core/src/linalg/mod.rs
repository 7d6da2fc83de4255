//! Dense real linear algebra kernels: spectral norm estimation, truncated
//! SVD, magnitude masks, and symmetric matrix roots.
//!
//! Everything here is pure and deterministic. Bound-relevant arithmetic is
//! 64-bit throughout, even when weights arrive as 32-bit.

mod eigen;
mod matrix;
mod svd;

pub use eigen::{sym_eigen, sym_inv_sqrt};
pub use matrix::{
    add_vec, dot, fnv1a64_bytes, fnv1a64_init, fnv1a64_u64, norm2, sub_vec, Matrix,
};
pub use svd::{full_svd, truncated_svd, SvdFactors};

use crate::error::{Error, Result};

/// Default stopping tolerance for the power iteration, relative.
pub const SPECTRAL_TOL: f64 = 1e-8;
/// Default iteration budget for the power iteration.
pub const SPECTRAL_MAX_ITERS: usize = 1000;

/// Result of the power-iteration spectral norm estimate.
#[derive(Debug, Clone, Copy)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value of `m`, by power iteration on M^T M with a fixed
/// normalized all-ones start vector. No RNG enters any bound computation.
///
/// Non-convergence within `max_iters` is reported through the `converged`
/// flag; the best estimate so far is still returned.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iters: usize) -> Result<SpectralEstimate> {
    if m.is_empty() {
        return Err(Error::invalid("spectral_norm of an empty matrix"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("spectral_norm tolerance must be > 0"));
    }
    let n = m.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma_prev = 0.0f64;
    let mut sigma = 0.0f64;

    for iter in 1..=max_iters {
        let w = m.matvec(&v);
        let mut y = m.matvec_t(&w);
        let y_norm = norm2(&y);
        if y_norm == 0.0 {
            // Start vector is in the null space of M^T M; restart from a
            // deterministic non-uniform direction once, otherwise M v = 0
            // for this direction and the largest column norm is the fallback.
            if iter == 1 {
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi = ((i + 1) as f64).sin();
                }
                let nv = norm2(&v);
                if nv > 0.0 {
                    for vi in v.iter_mut() {
                        *vi /= nv;
                    }
                    continue;
                }
            }
            return Ok(SpectralEstimate {
                value: 0.0,
                converged: true,
                iterations: iter,
            });
        }
        sigma = norm2(&w);
        for (vi, yi) in v.iter_mut().zip(y.iter_mut()) {
            *vi = *yi / y_norm;
        }
        if iter > 1 && (sigma - sigma_prev).abs() <= tol * sigma.max(f64::MIN_POSITIVE) {
            return Ok(SpectralEstimate {
                value: sigma,
                converged: true,
                iterations: iter,
            });
        }
        sigma_prev = sigma;
    }

    Ok(SpectralEstimate {
        value: sigma,
        converged: false,
        iterations: max_iters,
    })
}

/// Spectral norm with the default tolerance and iteration budget.
pub fn spectral_norm_default(m: &Matrix) -> Result<SpectralEstimate> {
    spectral_norm(m, SPECTRAL_TOL, SPECTRAL_MAX_ITERS)
}

/// Boolean mask over a matrix, same shape, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

/// Mask keeping exactly ceil(keep_fraction * rows * cols) entries, chosen by
/// largest absolute value; ties broken by lowest flat index.
pub fn topk_magnitude_mask(m: &Matrix, keep_fraction: f64) -> Result<BoolMask> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let total = m.rows() * m.cols();
    let keep = ((keep_fraction * total as f64).ceil() as usize).min(total);
    let mut idx: Vec<u32> = (0..total as u32).collect();
    idx.sort_unstable_by(|&a, &b| {
        let ma = m.data()[a as usize].abs();
        let mb = m.data()[b as usize].abs();
        mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
    });
    let mut data = vec![false; total];
    for &i in &idx[..keep] {
        data[i as usize] = true;
    }
    Ok(BoolMask {
        rows: m.rows(),
        cols: m.cols(),
        data,
    })
}

/// Splits `m` into (kept, dropped) by the mask: kept has the masked-true
/// entries, dropped the rest, kept + dropped == m.
pub fn split_by_mask(m: &Matrix, mask: &BoolMask) -> (Matrix, Matrix) {
    assert_eq!((m.rows(), m.cols()), (mask.rows(), mask.cols()));
    let mut kept = Matrix::zeros(m.rows(), m.cols());
    let mut dropped = Matrix::zeros(m.rows(), m.cols());
    for (i, (&v, &keep)) in m.data().iter().zip(mask.data().iter()).enumerate() {
        if keep {
            kept.data_mut()[i] = v;
        } else {
            dropped.data_mut()[i] = v;
        }
    }
    (kept, dropped)
}
