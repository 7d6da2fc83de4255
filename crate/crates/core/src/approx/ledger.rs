//! Per-call records of actual approximation error versus the proved bound.

use serde::{Deserialize, Serialize};

/// One forward call: the measured error, the bound it must stay under, the
/// input norm the bound was scaled by, and whether the call was a cache hit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundRecord {
    pub actual_error: f64,
    pub bound: f64,
    pub input_norm: f64,
    pub cache_hit: bool,
}

/// Aggregate counters over a ledger. Merging is elementwise, so totals from
/// per-worker ledgers combine associatively and commutatively.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub calls: u64,
    pub violations: u64,
    pub max_ratio: f64,
}

impl LedgerTotals {
    pub fn merge(&mut self, other: &LedgerTotals) {
        self.calls += other.calls;
        self.violations += other.violations;
        self.max_ratio = self.max_ratio.max(other.max_ratio);
    }
}

/// Accumulates bound records. A violation is `actual_error > bound`,
/// compared exactly in 64-bit arithmetic.
///
/// Detailed records can be disabled for long randomized runs; the totals are
/// always maintained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundLedger {
    pub records: Vec<BoundRecord>,
    pub totals: LedgerTotals,
    #[serde(skip)]
    keep_records: bool,
}

impl Default for BoundLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl BoundLedger {
    /// Ledger that keeps every record.
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            totals: LedgerTotals::default(),
            keep_records: true,
        }
    }

    /// Ledger that maintains totals only.
    pub fn totals_only() -> Self {
        Self {
            records: Vec::new(),
            totals: LedgerTotals::default(),
            keep_records: false,
        }
    }

    pub fn record(&mut self, actual_error: f64, bound: f64, input_norm: f64, cache_hit: bool) {
        self.totals.calls += 1;
        if actual_error > bound {
            self.totals.violations += 1;
        }
        let ratio = if bound > 0.0 {
            actual_error / bound
        } else if actual_error == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        self.totals.max_ratio = self.totals.max_ratio.max(ratio);
        if self.keep_records {
            self.records.push(BoundRecord {
                actual_error,
                bound,
                input_norm,
                cache_hit,
            });
        }
    }

    /// Appends `other`'s records and combines totals.
    pub fn merge(&mut self, other: BoundLedger) {
        self.totals.merge(&other.totals);
        if self.keep_records {
            self.records.extend(other.records);
        }
    }

    pub fn totals(&self) -> LedgerTotals {
        self.totals
    }

    pub fn violations(&self) -> u64 {
        self.totals.violations
    }
}
