use std::time::Duration;

use serde::Serialize;

/// Cumulative collector and barrier counters for one runtime.
///
/// Fields ending in `_ns` are wall-clock; everything else is a deterministic
/// work counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GcMetrics {
    pub minor_collections: u64,
    pub major_collections: u64,
    pub minor_ns: u64,
    pub major_ns: u64,
    pub mark_ns: u64,
    pub precompact_ns: u64,
    pub compact_ns: u64,
    pub adjust_ns: u64,

    pub objects_marked: u64,
    pub objects_copied: u64,
    pub objects_promoted: u64,
    pub bytes_copied: u64,
    pub h1_cards_scanned: u64,

    pub h2_cards_scanned: u64,
    pub h2_cards_cleaned: u64,
    pub h2_boundary_dirty: u64,
    pub h2_boundary_retained: u64,
    pub h2_bytes_walked: u64,
    pub backward_refs_found: u64,

    pub etr_marked: u64,
    pub objects_moved_to_h2: u64,
    pub bytes_moved_to_h2: u64,
    pub h2_flush_ops: u64,
    pub group_merges: u64,
    pub regions_freed: u64,
    pub reclaim_ops: u64,

    pub old_bytes_before_major: u64,
    pub old_bytes_reclaimed: u64,
    /// Sum over major collections of reclaimed/occupied old-generation bytes.
    pub reclaimed_fraction_sum: f64,

    pub h1_barrier_hits: u64,
    pub h2_barrier_hits: u64,
    pub barrier_ops: u64,
}

impl GcMetrics {
    pub fn mean_reclaimed_fraction(&self) -> f64 {
        if self.major_collections == 0 {
            0.0
        } else {
            self.reclaimed_fraction_sum / self.major_collections as f64
        }
    }
}

pub(crate) fn nanos(d: Duration) -> u64 {
    d.as_nanos().min(u64::MAX as u128) as u64
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinorStats {
    pub survivors: u64,
    pub promoted: u64,
    pub bytes_copied: u64,
    pub h1_cards_scanned: u64,
    pub h2_cards_scanned: u64,
    pub backward_refs: u64,
    /// The old generation could not absorb a worst-case promotion, so a
    /// major collection ran instead.
    pub escalated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MajorStats {
    pub marked: u64,
    pub etr_marked: u64,
    pub objects_moved_to_h2: u64,
    pub bytes_moved_to_h2: u64,
    pub flush_ops: u64,
    pub regions_freed: Vec<usize>,
    pub reclaim_ops: u64,
    pub old_used_before: u64,
    pub old_used_after: u64,
    pub adjusted_backward_refs: u64,
}
