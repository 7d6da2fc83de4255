//! Calibration-aware compressors: simplified Wanda, activation-aware Wanda,
//! and balanced truncation.
//!
//! Both Wanda variants prune per output row: each row keeps its top
//! ceil(keep * cols) scores and zeroes the rest, ties broken by lowest
//! column index. Simplified scoring multiplies |W_ij| by the weight column
//! norm; activation-aware scoring uses calibration activation column norms
//! instead.

use crate::error::{Error, Result};
use crate::linalg::{self, norm2, Matrix};
use std::collections::VecDeque;

/// Inputs captured at one matrix during calibration runs. Bounded FIFO:
/// oldest rows are dropped at capacity.
#[derive(Debug, Clone)]
pub struct CalibrationBuffer {
    dim: usize,
    rows: VecDeque<Vec<f64>>,
    capacity: usize,
}

pub const DEFAULT_CALIBRATION_CAPACITY: usize = 4096;

impl CalibrationBuffer {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            rows: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back(row.to_vec());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-input-dimension L2 norms ||X_j|| over the captured rows.
    pub fn column_norms(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim];
        for row in &self.rows {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v * v;
            }
        }
        sums.into_iter().map(f64::sqrt).collect()
    }

    /// Empirical input covariance X^T X / n with a small ridge
    /// (1e-8 * trace / d) for numerical floor safety.
    pub fn covariance(&self) -> Result<Matrix> {
        if self.rows.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        let n = self.rows.len() as f64;
        let mut cov = Matrix::zeros(self.dim, self.dim);
        for row in &self.rows {
            for i in 0..self.dim {
                let xi = row[i];
                if xi == 0.0 {
                    continue;
                }
                for j in i..self.dim {
                    cov[(i, j)] += xi * row[j];
                }
            }
        }
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = cov[(i, j)] / n;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let trace: f64 = (0..self.dim).map(|i| cov[(i, i)]).sum();
        let ridge = 1e-8 * trace / self.dim as f64;
        for i in 0..self.dim {
            cov[(i, i)] += ridge;
        }
        Ok(cov)
    }
}

/// Per-row top-k pruning with `score`, keeping ceil(keep * cols) entries per
/// output row.
fn prune_rows_by_score(w: &Matrix, keep: f64, column_scale: &[f64]) -> Result<Matrix> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::invalid(format!(
            "keep fraction must be in (0, 1], got {keep}"
        )));
    }
    if column_scale.len() != w.cols() {
        return Err(Error::dims(
            "prune column scales",
            format!("{}", w.cols()),
            format!("{}", column_scale.len()),
        ));
    }
    let cols = w.cols();
    let keep_count = ((keep * cols as f64).ceil() as usize).min(cols);
    let mut out = Matrix::zeros(w.rows(), w.cols());
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..w.rows() {
        let row = w.row(i);
        order.clear();
        order.extend(0..cols);
        order.sort_unstable_by(|&a, &b| {
            let sa = row[a].abs() * column_scale[a];
            let sb = row[b].abs() * column_scale[b];
            sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
        });
        let out_row = out.row_mut(i);
        for &j in &order[..keep_count] {
            out_row[j] = row[j];
        }
    }
    Ok(out)
}

/// Wanda with weight-times-column-norm scoring: score_ij = |W_ij| * ||W_:,j||.
pub fn wanda_simplified(w: &Matrix, keep: f64) -> Result<Matrix> {
    let column_norms: Vec<f64> = (0..w.cols()).map(|j| norm2(&w.col(j))).collect();
    prune_rows_by_score(w, keep, &column_norms)
}

/// Wanda with calibration scoring: score_ij = |W_ij| * ||X_j||, where X_j is
/// the j-th input feature across the calibration rows.
pub fn wanda_activation_aware(
    w: &Matrix,
    calibration: &CalibrationBuffer,
    keep: f64,
) -> Result<Matrix> {
    if calibration.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if calibration.dim() != w.cols() {
        return Err(Error::dims(
            "wanda_activation_aware",
            format!("{} input dims", w.cols()),
            format!("{}", calibration.dim()),
        ));
    }
    let norms = calibration.column_norms();
    prune_rows_by_score(w, keep, &norms)
}

/// Whitened rank-r truncation against an input covariance: factor
/// W Sigma^{1/2} at rank r and unwhiten. With the identity covariance this
/// is plain SVD truncation; in general it minimizes ||(W - W_hat) Sigma^{1/2}||
/// over rank-r matrices (data-weighted Eckart-Young).
pub fn balanced_truncation(w: &Matrix, input_cov: &Matrix, r: usize) -> Result<Matrix> {
    if input_cov.rows() != w.cols() || input_cov.cols() != w.cols() {
        return Err(Error::dims(
            "balanced_truncation covariance",
            format!("{0}x{0}", w.cols()),
            format!("{}x{}", input_cov.rows(), input_cov.cols()),
        ));
    }
    let (sqrt_cov, inv_sqrt_cov) = linalg::sym_inv_sqrt(input_cov, 1e-10)?;
    let whitened = w.matmul(&sqrt_cov);
    let factors = linalg::truncated_svd(&whitened, r)?;
    Ok(factors.reconstruct().matmul(&inv_sqrt_cov))
}
