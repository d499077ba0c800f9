//! Degenerate-input bookkeeping.
//!
//! Operations that hit a defined-but-degenerate case (zero-norm vectors,
//! constant rows, zero variance) produce a conventional value instead of an
//! error and flag the event here. The context is shared read-mostly across
//! worker threads.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degeneracy {
    /// Cosine distance asked of a zero-norm vector; value 1.0 used.
    ZeroNormVector,
    /// Constant pattern row under the correlation metric; entry 1.0 used.
    ConstantRow,
    /// Zero variance within a z-scoring session or across splits.
    ZeroVariance,
    /// Item with an empty category annotation set (all-zero multi-hot row).
    EmptyCategorySet,
    /// Constant target column during fraction selection; fraction 1.0 used.
    DegenerateTestColumn,
    /// Zero-variance dissimilarity vector; correlation 0.0 used.
    DegenerateUtv,
}

const KINDS: [Degeneracy; 6] = [
    Degeneracy::ZeroNormVector,
    Degeneracy::ConstantRow,
    Degeneracy::ZeroVariance,
    Degeneracy::EmptyCategorySet,
    Degeneracy::DegenerateTestColumn,
    Degeneracy::DegenerateUtv,
];

impl Degeneracy {
    fn slot(self) -> usize {
        KINDS.iter().position(|k| *k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Degeneracy::ZeroNormVector => "zero_norm_vector",
            Degeneracy::ConstantRow => "constant_row",
            Degeneracy::ZeroVariance => "zero_variance",
            Degeneracy::EmptyCategorySet => "empty_category_set",
            Degeneracy::DegenerateTestColumn => "degenerate_test_column",
            Degeneracy::DegenerateUtv => "degenerate_utv",
        }
    }
}

#[derive(Debug, Default)]
pub struct Context {
    counts: [AtomicU64; 6],
}

impl Context {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flag(&self, kind: Degeneracy) {
        self.counts[kind.slot()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, kind: Degeneracy) -> u64 {
        self.counts[kind.slot()].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    /// Nonzero counters by name, for run reports.
    pub fn snapshot(&self) -> BTreeMap<&'static str, u64> {
        KINDS
            .iter()
            .filter_map(|k| {
                let n = self.count(*k);
                (n > 0).then_some((k.name(), n))
            })
            .collect()
    }
}
