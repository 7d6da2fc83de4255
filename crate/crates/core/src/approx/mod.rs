//! Three-stage approximation of a weight matrix with per-call verified
//! error bounds.
//!
//! A matrix W is decomposed as W = W_sparse + W_residual, where W_sparse
//! keeps the top fraction of entries by magnitude, and W_sparse is then
//! factored as U S V^T + R by rank-r SVD truncation. The approximate
//! forward pass combines the low-rank product with the exact residual term
//! and, when a cached input is close enough, reuses the stored low-rank
//! output instead of recomputing it.
//!
//! Every call yields an operator-norm bound:
//!   miss:  ||W x - y_hat|| <= sigma_{r+1} * ||x||
//!   hit:   ||W x - y_hat|| <= ||f_approx|| * d + sigma_{r+1} * ||x||
//!                              + ||W_residual|| * d
//! with d the distance to the cached input. The bound terms are additive
//! across stages; there is no multiplicative interaction.

mod cache;
mod ledger;

pub use cache::{CacheHit, CacheStore, CompressMemo, DEFAULT_CACHE_CAPACITY};
pub use ledger::{BoundLedger, BoundRecord, LedgerTotals};

use crate::container;
use crate::error::{Error, Result};
use crate::groups::MatrixId;
use crate::linalg::{
    self, add_vec, norm2, spectral_norm_default, split_by_mask, sub_vec, topk_magnitude_mask,
    Matrix, SvdFactors,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Knobs for one compressed matrix: sparsity keep fraction k, SVD rank r,
/// cache distance threshold delta, and cache capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub keep_fraction: f64,
    pub rank: usize,
    pub cache_delta: f64,
    #[serde(default = "default_capacity")]
    pub cache_capacity: usize,
}

fn default_capacity() -> usize {
    DEFAULT_CACHE_CAPACITY
}

impl CompressionConfig {
    pub fn new(keep_fraction: f64, rank: usize, cache_delta: f64) -> Self {
        Self {
            keep_fraction,
            rank,
            cache_delta,
            cache_capacity: DEFAULT_CACHE_CAPACITY,
        }
    }

    /// Lossless configuration for an m x n matrix: keep everything, full
    /// rank, no cache reuse.
    pub fn identity_for(rows: usize, cols: usize) -> Self {
        Self::new(1.0, rows.min(cols), 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank must be >= 1"));
        }
        if !(self.cache_delta >= 0.0) {
            return Err(Error::invalid(format!(
                "cache_delta must be >= 0, got {}",
                self.cache_delta
            )));
        }
        Ok(())
    }
}

/// A compressed weight matrix: the sparse/low-rank/residual decomposition
/// plus the cached operator norms every bound is built from.
///
/// Invariant: W - W_residual - U S V^T has spectral norm `norm_r`
/// (the Eckart-Young residual of the retained part).
#[derive(Debug, Clone)]
pub struct ApproxLinear {
    pub label: MatrixId,
    /// Original matrix, retained for per-call verification.
    pub w: Matrix,
    /// Dropped (small-magnitude) part: W - W_sparse.
    pub w_residual: Matrix,
    /// Rank-r factors of the retained part W_sparse.
    pub factors: SvdFactors,
    /// ||U S V^T||_2 = leading retained singular value.
    pub norm_approx: f64,
    /// ||W_sparse - U S V^T||_2 = sigma_{r+1} of W_sparse.
    pub norm_r: f64,
    /// ||W_residual||_2.
    pub norm_residual: f64,
    /// ||W||_2, used by the retrieval-stage bound.
    pub norm_full: f64,
    /// Non-zeros retained by the magnitude mask; drives the cost model.
    pub nnz_sparse: usize,
    pub cfg: CompressionConfig,
    /// Retained part kept densely when the truncation is lossless
    /// (sigma_{r+1} = 0): the factored map then equals W_sparse exactly, and
    /// evaluating it densely keeps the measured error at the zero bound.
    lossless_sparse: Option<Matrix>,
}

/// Cost model selector for [`ApproxLinear::flop_cost`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    Exact,
    Living,
}

/// Per-stage error bounds for given cache distance delta and input norm.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageBounds {
    pub retrieval: f64,
    pub sparse: f64,
    pub interpolation: f64,
    pub composition: f64,
}

/// Compresses `w`: magnitude mask at `cfg.keep_fraction`, then rank-r SVD of
/// the retained part. Operator norms for all bound terms are computed here,
/// in 64-bit arithmetic, so no norm estimation happens on the forward path.
pub fn compress(label: MatrixId, w: &Matrix, cfg: &CompressionConfig) -> Result<ApproxLinear> {
    compress_with_disk(label, w, cfg, None)
}

/// [`compress`] with an optional directory of persisted SVD factors. Factors
/// are keyed by matrix content and (k, r); a cache miss computes and stores
/// them.
pub fn compress_with_disk(
    label: MatrixId,
    w: &Matrix,
    cfg: &CompressionConfig,
    disk_dir: Option<&Path>,
) -> Result<ApproxLinear> {
    cfg.validate()?;
    let max_rank = w.rows().min(w.cols());
    if cfg.rank > max_rank {
        return Err(Error::RankOutOfRange {
            rank: cfg.rank,
            max: max_rank,
        });
    }

    let mask = topk_magnitude_mask(w, cfg.keep_fraction)?;
    let (w_sparse, w_residual) = split_by_mask(w, &mask);
    let nnz_sparse = w_sparse.nnz();

    let cached = disk_dir.and_then(|dir| load_factors(dir, w, cfg).ok().flatten());
    let (factors, norm_residual, norm_full) = match cached {
        Some(hit) => hit,
        None => {
            let factors = linalg::truncated_svd(&w_sparse, cfg.rank)?;
            let norm_residual = spectral_norm_default(&w_residual)?.value;
            let norm_full = spectral_norm_default(w)?.value;
            if let Some(dir) = disk_dir {
                // Persisting is best-effort; an unwritable cache dir must not
                // fail the compression itself.
                let _ = store_factors(dir, w, cfg, &factors, norm_residual, norm_full);
            }
            (factors, norm_residual, norm_full)
        }
    };

    let norm_approx = factors.s.first().copied().unwrap_or(0.0);
    let norm_r = factors.sigma_next;
    let lossless_sparse = (norm_r == 0.0).then_some(w_sparse);

    Ok(ApproxLinear {
        label,
        w: w.clone(),
        w_residual,
        factors,
        norm_approx,
        norm_r,
        norm_residual,
        norm_full,
        nnz_sparse,
        cfg: *cfg,
        lossless_sparse,
    })
}

impl ApproxLinear {
    pub fn rows(&self) -> usize {
        self.w.rows()
    }

    pub fn cols(&self) -> usize {
        self.w.cols()
    }

    /// Fresh semantic cache sized per this matrix's config.
    pub fn new_cache(&self) -> CacheStore {
        CacheStore::new(self.cfg.cache_capacity, self.cfg.cache_delta)
    }

    /// The retained map U S V^T applied to `x`; evaluated densely when the
    /// truncation is lossless.
    pub fn apply_approx(&self, x: &[f64]) -> Vec<f64> {
        match &self.lossless_sparse {
            Some(w_sparse) => w_sparse.matvec(x),
            None => self.factors.apply(x),
        }
    }

    /// One approximate forward call.
    ///
    /// On a cache hit (nearest stored input within delta), the stored
    /// low-rank output is reused; on a miss the low-rank product is computed
    /// and inserted. The exact residual term W_residual x is always applied.
    /// When a ledger is given, the exact product W x is computed alongside
    /// and the measured error recorded against the bound ("fast mode" is
    /// simply passing `None`).
    pub fn forward_living(
        &self,
        x: &[f64],
        cache: &mut CacheStore,
        mut ledger: Option<&mut BoundLedger>,
    ) -> Result<Vec<f64>> {
        if x.len() != self.w.cols() {
            return Err(Error::dims(
                format!("forward_living {}", self.label),
                format!("{}", self.w.cols()),
                format!("{}", x.len()),
            ));
        }
        let x_norm = norm2(x);

        let hit = cache
            .lookup(x)
            .map(|h| (h.output.to_vec(), h.distance));

        let (y_hat, bound, was_hit) = match hit {
            Some((y_cached, dist)) => {
                let y_hat = add_vec(&y_cached, &self.w_residual.matvec(x));
                let bound = self.norm_approx * dist
                    + self.norm_r * x_norm
                    + self.norm_residual * dist;
                (y_hat, bound, true)
            }
            None => {
                let y_approx = self.apply_approx(x);
                // Lossless truncation makes the total map exactly W; one
                // fused multiply keeps the measured error at the zero bound.
                let y_hat = if self.lossless_sparse.is_some() {
                    self.w.matvec(x)
                } else {
                    add_vec(&y_approx, &self.w_residual.matvec(x))
                };
                let bound = self.norm_r * x_norm;
                cache.insert(x.to_vec(), y_approx);
                (y_hat, bound, false)
            }
        };

        if let Some(ledger) = ledger.as_deref_mut() {
            let exact = self.w.matvec(x);
            let actual = norm2(&sub_vec(&exact, &y_hat));
            ledger.record(actual, bound, x_norm, was_hit);
        }
        Ok(y_hat)
    }

    /// Per-stage bounds at cache distance `delta` and input norm `x_norm`.
    pub fn stage_bounds(&self, delta: f64, x_norm: f64) -> Result<StageBounds> {
        if !(delta >= 0.0) || !(x_norm >= 0.0) {
            return Err(Error::invalid("stage_bounds requires delta, x_norm >= 0"));
        }
        Ok(StageBounds {
            retrieval: self.norm_full * delta,
            sparse: self.norm_residual * x_norm,
            interpolation: self.norm_r * x_norm,
            composition: self.norm_approx * delta
                + self.norm_r * x_norm
                + self.norm_residual * delta,
        })
    }

    /// Tighter delta never increases the composition bound; this checks the
    /// inequality for a concrete pair.
    pub fn monotonicity_check(&self, delta1: f64, delta2: f64, x_norm: f64) -> Result<bool> {
        if !(0.0 <= delta1 && delta1 <= delta2) {
            return Err(Error::invalid("monotonicity_check requires 0 <= d1 <= d2"));
        }
        let b1 = self.stage_bounds(delta1, x_norm)?.composition;
        let b2 = self.stage_bounds(delta2, x_norm)?.composition;
        Ok(b1 <= b2)
    }

    /// FLOP count per call under a deployment that stores the retained
    /// top-k weights sparsely next to the rank-r factors. The exact path is
    /// a dense multiply; the living path pays the low-rank product (or, on
    /// a hit, a full-capacity cache scan) plus the sparse retained part.
    /// The verification multiply is bookkeeping, not deployment cost.
    pub fn flop_cost(&self, mode: CostMode, hit: bool) -> u64 {
        let m = self.w.rows() as u64;
        let n = self.w.cols() as u64;
        match mode {
            CostMode::Exact => 2 * m * n,
            CostMode::Living => {
                let sparse = 2 * self.nnz_sparse as u64;
                if hit {
                    self.cfg.cache_capacity as u64 * n + sparse
                } else {
                    let r = self.factors.rank() as u64;
                    2 * r * (m + n) + sparse
                }
            }
        }
    }
}

/// A matrix replaced by an arbitrary precomputed approximation (pruned or
/// low-rank), verified per call against ||W - W_hat||_2 * ||x||.
#[derive(Debug, Clone)]
pub struct StaticApprox {
    pub label: MatrixId,
    pub w: Matrix,
    pub w_hat: Matrix,
    /// ||W - W_hat||_2.
    pub norm_err: f64,
}

impl StaticApprox {
    pub fn new(label: MatrixId, w: Matrix, w_hat: Matrix) -> Result<Self> {
        if (w.rows(), w.cols()) != (w_hat.rows(), w_hat.cols()) {
            return Err(Error::dims(
                "StaticApprox::new",
                format!("{}x{}", w.rows(), w.cols()),
                format!("{}x{}", w_hat.rows(), w_hat.cols()),
            ));
        }
        let norm_err = spectral_norm_default(&w.sub(&w_hat))?.value;
        Ok(Self {
            label,
            w,
            w_hat,
            norm_err,
        })
    }

    pub fn forward(&self, x: &[f64], mut ledger: Option<&mut BoundLedger>) -> Result<Vec<f64>> {
        if x.len() != self.w.cols() {
            return Err(Error::dims(
                format!("StaticApprox::forward {}", self.label),
                format!("{}", self.w.cols()),
                format!("{}", x.len()),
            ));
        }
        let y_hat = self.w_hat.matvec(x);
        if let Some(ledger) = ledger.as_deref_mut() {
            let exact = self.w.matvec(x);
            let actual = norm2(&sub_vec(&exact, &y_hat));
            let x_norm = norm2(x);
            ledger.record(actual, self.norm_err * x_norm, x_norm, false);
        }
        Ok(y_hat)
    }
}

fn factor_cache_key(w: &Matrix, cfg: &CompressionConfig) -> u64 {
    let mut h = w.checksum();
    h = linalg::fnv1a64_u64(h, cfg.keep_fraction.to_bits());
    h = linalg::fnv1a64_u64(h, cfg.rank as u64);
    h
}

fn load_factors(
    dir: &Path,
    w: &Matrix,
    cfg: &CompressionConfig,
) -> Result<Option<(SvdFactors, f64, f64)>> {
    let path = dir.join(format!("svd-{:016x}.tensors", factor_cache_key(w, cfg)));
    if !path.exists() {
        return Ok(None);
    }
    let c = container::read_container(&path)?;
    let u = c.tensor_matrix("u")?;
    let s_mat = c.tensor_matrix("s")?;
    let v = c.tensor_matrix("v")?;
    let scalars = c.tensor_matrix("scalars")?;
    if scalars.data().len() != 3 || u.rows() != w.rows() || v.rows() != w.cols() {
        return Ok(None);
    }
    let factors = SvdFactors {
        u,
        s: s_mat.data().to_vec(),
        v,
        sigma_next: scalars.data()[0],
    };
    Ok(Some((factors, scalars.data()[1], scalars.data()[2])))
}

fn store_factors(
    dir: &Path,
    w: &Matrix,
    cfg: &CompressionConfig,
    factors: &SvdFactors,
    norm_residual: f64,
    norm_full: f64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("svd-{:016x}.tensors", factor_cache_key(w, cfg)));
    let r = factors.s.len();
    let scalars = Matrix::new(1, 3, vec![factors.sigma_next, norm_residual, norm_full])?;
    let s_row = Matrix::new(1, r, factors.s.clone())?;
    container::write_container(
        &path,
        &[
            ("u", &factors.u),
            ("s", &s_row),
            ("v", &factors.v),
            ("scalars", &scalars),
        ],
        &[],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{ComponentType, CompressionGroup};

    fn test_id() -> MatrixId {
        MatrixId::new(CompressionGroup::new(0, ComponentType::MlpFc), None)
    }

    fn example_2x2() -> ApproxLinear {
        // keep_fraction 0.25 keeps only the largest entry (value 2); the
        // dropped entry of value 1 forms the residual.
        let w = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        compress(test_id(), &w, &CompressionConfig::new(0.25, 1, 0.0)).unwrap()
    }

    #[test]
    fn compress_splits_sparse_and_residual() {
        let a = example_2x2();
        assert_eq!(a.w_residual.data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!((a.norm_residual - 1.0).abs() < 1e-10);
        assert_eq!(a.norm_r, 0.0);
        assert!((a.norm_approx - 2.0).abs() < 1e-12);
        assert_eq!(a.nnz_sparse, 1);
        // Retained part reconstructs as [[2,0],[0,0]].
        let rec = a.factors.reconstruct();
        assert!((rec[(0, 0)] - 2.0).abs() < 1e-12);
        assert!(rec[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn compress_keep_half_keeps_two_entries() {
        let w = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let a = compress(test_id(), &w, &CompressionConfig::new(0.5, 2, 0.0)).unwrap();
        // ceil(0.5 * 4) = 2 entries retained: both non-zeros survive.
        assert_eq!(a.nnz_sparse, 2);
        assert_eq!(a.norm_residual, 0.0);
        assert_eq!(a.norm_r, 0.0);
    }

    #[test]
    fn identity_config_is_lossless() {
        let w = Matrix::new(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap();
        let a = compress(
            test_id(),
            &w,
            &CompressionConfig::identity_for(w.rows(), w.cols()),
        )
        .unwrap();
        assert_eq!(a.norm_residual, 0.0);
        assert_eq!(a.norm_r, 0.0);
    }

    #[test]
    fn rank_too_large_is_a_parameter_error() {
        let w = Matrix::identity(2);
        let err = compress(test_id(), &w, &CompressionConfig::new(0.5, 3, 0.0));
        assert!(matches!(err, Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn decomposition_invariant_holds() {
        let w = Matrix::from_fn(6, 4, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin());
        let a = compress(test_id(), &w, &CompressionConfig::new(0.5, 2, 0.1)).unwrap();
        let remainder = a.w.sub(&a.w_residual).sub(&a.factors.reconstruct());
        let norm = spectral_norm_default(&remainder).unwrap().value;
        assert!(
            (norm - a.norm_r).abs() <= 1e-8 * a.norm_full.max(1.0),
            "||W - W_res - USV^T|| = {norm}, norm_r = {}",
            a.norm_r
        );
    }

    #[test]
    fn forward_miss_matches_hand_computation() {
        let a = example_2x2();
        let mut cache = a.new_cache();
        let mut ledger = BoundLedger::new();
        // x = (0, 1): low-rank part sees only the zeroed column, residual
        // restores the dropped weight, so the output is exact.
        let y = a
            .forward_living(&[0.0, 1.0], &mut cache, Some(&mut ledger))
            .unwrap();
        assert_eq!(y, vec![0.0, 1.0]);
        let rec = &ledger.records[0];
        assert!(rec.actual_error.abs() < 1e-15);
        assert_eq!(rec.bound, 0.0);
        assert!(!rec.cache_hit);
        assert_eq!(ledger.violations(), 0);
    }

    #[test]
    fn exact_repeat_hits_with_zero_delta() {
        let a = example_2x2();
        let mut cache = a.new_cache();
        let mut ledger = BoundLedger::new();
        let x = [1.0, 2.0];
        let y1 = a.forward_living(&x, &mut cache, Some(&mut ledger)).unwrap();
        let y2 = a.forward_living(&x, &mut cache, Some(&mut ledger)).unwrap();
        assert_eq!(y1, y2);
        assert!(ledger.records[1].cache_hit);
        // delta_actual = 0 collapses the hit bound to the miss bound.
        assert_eq!(ledger.records[0].bound, ledger.records[1].bound);
        assert_eq!(ledger.violations(), 0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = example_2x2();
        let mut cache = a.new_cache();
        assert!(a.forward_living(&[1.0], &mut cache, None).is_err());
    }

    #[test]
    fn stage_bounds_hand_example() {
        let a = example_2x2();
        let b = a.stage_bounds(0.5, 1.0).unwrap();
        // composition = 2 * 0.5 + 0 * 1 + 1 * 0.5 = 1.5
        assert!((b.composition - 1.5).abs() < 1e-10);
        assert!((b.retrieval - 1.0).abs() < 1e-8); // ||W|| = 2, delta = 0.5
        assert!((b.sparse - 1.0).abs() < 1e-10);
        assert_eq!(b.interpolation, 0.0);
    }

    #[test]
    fn stage_bounds_degenerate_collapses() {
        let a = example_2x2();
        let at_zero = a.stage_bounds(0.0, 2.0).unwrap();
        assert_eq!(at_zero.composition, at_zero.interpolation);
        // norm_r = 0 here, so composition is (norm_approx + norm_residual) * delta.
        let b = a.stage_bounds(1.0, 2.0).unwrap();
        assert!((b.composition - (a.norm_approx + a.norm_residual)).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_in_delta() {
        let a = example_2x2();
        assert!(a.monotonicity_check(0.0, 1.0, 1.0).unwrap());
        assert!(a.monotonicity_check(0.3, 0.3, 2.0).unwrap());
        assert!(a.monotonicity_check(1.0, 0.5, 1.0).is_err());
        let b0 = a.stage_bounds(0.0, 1.0).unwrap().composition;
        let b1 = a.stage_bounds(1.0, 1.0).unwrap().composition;
        assert!((b1 - b0 - (a.norm_approx + a.norm_residual)).abs() < 1e-12);
    }

    #[test]
    fn flop_cost_model() {
        // Shapes from a GPT-2 MLP up-projection.
        let w = Matrix::from_fn(48, 192, |i, j| ((i * 193 + j) as f64 * 0.11).sin());
        let mut cfg = CompressionConfig::new(0.05, 4, 0.1);
        cfg.cache_capacity = 16;
        let a = compress(test_id(), &w, &cfg).unwrap();
        let exact = a.flop_cost(CostMode::Exact, false);
        let miss = a.flop_cost(CostMode::Living, false);
        let hit = a.flop_cost(CostMode::Living, true);
        assert_eq!(exact, 2 * 48 * 192);
        assert_eq!(
            miss,
            2 * 4 * (48 + 192) + 2 * a.nnz_sparse as u64
        );
        assert_eq!(hit, 16 * 192 + 2 * a.nnz_sparse as u64);
        assert!(miss < exact / 4);
        assert!(hit < exact / 2);
    }

    #[test]
    fn lossless_config_has_no_cost_benefit() {
        let w = Matrix::from_fn(8, 8, |i, j| ((i + 2 * j) as f64 * 0.21).cos());
        let a = compress(
            test_id(),
            &w,
            &CompressionConfig::identity_for(8, 8),
        )
        .unwrap();
        assert!(a.flop_cost(CostMode::Living, false) >= a.flop_cost(CostMode::Exact, false));
    }

    #[test]
    fn static_approx_records_theorem_bound() {
        let w = Matrix::new(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let w_hat = Matrix::new(2, 2, vec![3.0, 0.0, 0.0, 0.0]).unwrap();
        let s = StaticApprox::new(test_id(), w, w_hat).unwrap();
        assert!((s.norm_err - 1.0).abs() < 1e-10);
        let mut ledger = BoundLedger::new();
        let y = s.forward(&[0.0, 2.0], Some(&mut ledger)).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        let rec = &ledger.records[0];
        assert!((rec.actual_error - 2.0).abs() < 1e-12);
        assert!(rec.actual_error <= rec.bound);
        assert_eq!(ledger.violations(), 0);
    }

    #[test]
    fn memo_reuses_compressions() {
        let memo = CompressMemo::new();
        let w = Matrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        let cfg = CompressionConfig::new(0.5, 2, 0.0);
        let a = memo.get_or_compress(test_id(), &w, &cfg).unwrap();
        let b = memo.get_or_compress(test_id(), &w, &cfg).unwrap();
        assert!(std::sync::Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn disk_cache_round_trip() {
        let dir = std::env::temp_dir().join(format!(
            "compressense-svdcache-{}",
            std::process::id()
        ));
        let _ = std::fs::remove_dir_all(&dir);
        let w = Matrix::from_fn(6, 5, |i, j| ((i * 5 + j) as f64 * 0.173).sin());
        let cfg = CompressionConfig::new(0.4, 2, 0.0);
        let first = compress_with_disk(test_id(), &w, &cfg, Some(&dir)).unwrap();
        let second = compress_with_disk(test_id(), &w, &cfg, Some(&dir)).unwrap();
        assert_eq!(first.factors.s, second.factors.s);
        assert_eq!(first.norm_residual, second.norm_residual);
        assert_eq!(first.norm_full, second.norm_full);
        let _ = std::fs::remove_dir_all(&dir);
    }
}
