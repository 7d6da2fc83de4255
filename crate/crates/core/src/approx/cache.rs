//! Semantic cache of low-rank outputs, plus memoization of compressed
//! matrices across harness evaluations.

use crate::approx::ApproxLinear;
use crate::groups::MatrixId;
use crate::linalg::{norm2, sub_vec, Matrix};
use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

pub const DEFAULT_CACHE_CAPACITY: usize = 1024;

/// FIFO ring of (input, cached low-rank output) pairs. A lookup returns the
/// nearest stored input by Euclidean distance; it is a hit when the distance
/// is within `delta`.
#[derive(Debug, Clone)]
pub struct CacheStore {
    entries: VecDeque<(Vec<f64>, Vec<f64>)>,
    capacity: usize,
    delta: f64,
}

/// Result of a successful cache lookup.
pub struct CacheHit<'a> {
    pub output: &'a [f64],
    pub distance: f64,
}

impl CacheStore {
    pub fn new(capacity: usize, delta: f64) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity: capacity.max(1),
            delta,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Nearest entry within `delta` of `x`, if any. Ties keep the oldest
    /// entry (first scanned), which keeps lookups deterministic.
    pub fn lookup(&self, x: &[f64]) -> Option<CacheHit<'_>> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (xc, _)) in self.entries.iter().enumerate() {
            let dist = norm2(&sub_vec(x, xc));
            match best {
                Some((_, d)) if d <= dist => {}
                _ => best = Some((i, dist)),
            }
        }
        match best {
            Some((i, dist)) if dist <= self.delta => Some(CacheHit {
                output: &self.entries[i].1,
                distance: dist,
            }),
            _ => None,
        }
    }

    /// Inserts an (input, output) pair, evicting the oldest entry at
    /// capacity.
    pub fn insert(&mut self, x: Vec<f64>, y: Vec<f64>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((x, y));
    }
}

/// Memoizes compressed matrices by (matrix id, keep fraction, rank) so that
/// harness sweeps re-evaluating the same group never repeat an SVD. An
/// optional directory persists factors across processes (one file per key).
pub struct CompressMemo {
    entries: Mutex<HashMap<MemoKey, Arc<ApproxLinear>>>,
    disk_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct MemoKey {
    id: MatrixId,
    keep_bits: u64,
    rank: usize,
}

impl Default for CompressMemo {
    fn default() -> Self {
        Self::new()
    }
}

impl CompressMemo {
    pub fn new() -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            disk_dir: None,
        }
    }

    /// Memo with an on-disk layer for SVD factors, keyed by matrix content
    /// and compression parameters.
    pub fn with_disk_dir(dir: PathBuf) -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            disk_dir: Some(dir),
        }
    }

    pub fn disk_dir(&self) -> Option<&PathBuf> {
        self.disk_dir.as_deref().map(|_| self.disk_dir.as_ref().unwrap())
    }

    /// Returns the memoized compression of `w`, computing (and possibly
    /// persisting) it on first use.
    pub fn get_or_compress(
        &self,
        id: MatrixId,
        w: &Matrix,
        cfg: &super::CompressionConfig,
    ) -> crate::Result<Arc<ApproxLinear>> {
        let key = MemoKey {
            id,
            keep_bits: cfg.keep_fraction.to_bits(),
            rank: cfg.rank,
        };
        if let Some(hit) = self.entries.lock().unwrap().get(&key) {
            return Ok(Arc::clone(hit));
        }
        let compressed = Arc::new(super::compress_with_disk(
            id,
            w,
            cfg,
            self.disk_dir.as_deref(),
        )?);
        self.entries
            .lock()
            .unwrap()
            .insert(key, Arc::clone(&compressed));
        Ok(compressed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_eviction() {
        let mut cache = CacheStore::new(2, 0.0);
        cache.insert(vec![1.0], vec![10.0]);
        cache.insert(vec![2.0], vec![20.0]);
        cache.insert(vec![3.0], vec![30.0]);
        assert_eq!(cache.len(), 2);
        assert!(cache.lookup(&[1.0]).is_none(), "oldest entry was evicted");
        assert!(cache.lookup(&[2.0]).is_some());
    }

    #[test]
    fn lookup_respects_delta() {
        let mut cache = CacheStore::new(4, 0.5);
        cache.insert(vec![0.0, 0.0], vec![1.0]);
        assert!(cache.lookup(&[0.3, 0.0]).is_some());
        assert!(cache.lookup(&[0.6, 0.0]).is_none());
        let hit = cache.lookup(&[0.3, 0.4]).unwrap();
        assert!((hit.distance - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lookup_picks_nearest() {
        let mut cache = CacheStore::new(4, 10.0);
        cache.insert(vec![0.0], vec![1.0]);
        cache.insert(vec![5.0], vec![2.0]);
        let hit = cache.lookup(&[4.0]).unwrap();
        assert_eq!(hit.output, &[2.0]);
        assert!((hit.distance - 1.0).abs() < 1e-12);
    }
}
