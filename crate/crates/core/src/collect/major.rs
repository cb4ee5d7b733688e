//! Full mark-compact collection of H1 with transfer of cache-marked objects
//! into H2.
//!
//! Phases:
//! 1. mark: trace from the root slots. References into H2 set the target
//!    region's USED bit and stop there. Backward references are roots only
//!    while the group holding their slot is live, which is iterated to a
//!    fixpoint. The migration policy then marks cache candidates.
//! 2. precompact: assign new addresses (old generation slots, or H2 region
//!    space for marked candidates) and rewrite H1-side references.
//! 3. compact: slide survivors down and write candidates into H2.
//! 4. adjust: rewrite backward-reference slots in H2 to the new H1 addresses.
//!
//! Unused region groups are freed at the end.

use std::collections::HashSet;
use std::time::Instant;

use crate::error::{HeapError, Result};
use crate::metrics::{nanos, MajorStats};
use crate::migration::ImageWriter;
use crate::object::{clear_forwarding, forwarding_of, with_forwarding, TcWord, WORD};
use crate::runtime::{Collection, Runtime};

struct Move {
    src: u64,
    dst: u64,
    size: u64,
    to_h2: bool,
}

impl Runtime {
    pub fn major_collect(&mut self) -> Result<MajorStats> {
        self.major_collect_inner(true)
    }

    fn mark_value(&mut self, v: u64, stack: &mut Vec<u64>, marked: &mut u64) {
        if v == 0 {
            return;
        }
        if self.h1.layout.contains(v) {
            if self.h1.set_mark(v) {
                *marked += 1;
                stack.push(v);
            }
        } else if self.h2.contains(v) {
            let r = self.h2.region_of(v);
            self.h2.set_used(r);
        }
    }

    fn drain_marks(&mut self, stack: &mut Vec<u64>, marked: &mut u64) -> Result<()> {
        while let Some(obj) = stack.pop() {
            let desc = self.descriptor_at(obj)?.clone();
            for (off, _) in desc.reference_offsets() {
                let v = self.h1.load(obj + off as u64);
                self.mark_value(v, stack, marked);
            }
        }
        Ok(())
    }

    fn live_groups(&self) -> HashSet<usize> {
        self.h2
            .regions()
            .iter()
            .filter(|r| r.used)
            .filter_map(|r| self.h2.group_of(r.index))
            .collect()
    }

    fn slot_group_live(&self, slot: u64, live: &HashSet<usize>) -> bool {
        self.h2.group_of(self.h2.region_of(slot)).is_some_and(|g| live.contains(&g))
    }

    /// New address of an H1 object after precompact; H2 addresses and null
    /// are unchanged.
    fn forwarded(&self, v: u64) -> Result<u64> {
        if v == 0 || !self.h1.layout.contains(v) {
            return Ok(v);
        }
        forwarding_of(self.h1.load(v)).ok_or_else(|| HeapError::Corruption {
            addr: v,
            reason: "reference to an unmarked object after marking".into(),
        })
    }

    pub(crate) fn major_collect_inner(&mut self, run_minor: bool) -> Result<MajorStats> {
        let start = Instant::now();
        if run_minor && self.h1.old_free() >= self.h1.young_used() {
            self.scavenge()?;
        } else {
            self.refresh_backward_refs()?;
        }
        let old_before = self.h1.old_used();

        // Mark.
        let t = Instant::now();
        self.h1.clear_marks();
        self.h2.clear_used();
        let mut stack = Vec::new();
        let mut marked = 0u64;
        let roots: Vec<u64> = self.roots.values().collect();
        for v in roots {
            self.mark_value(v, &mut stack, &mut marked);
        }
        let mut taken = vec![false; self.backward.len()];
        let live = loop {
            self.drain_marks(&mut stack, &mut marked)?;
            let live = self.live_groups();
            let mut progressed = false;
            for (i, taken) in taken.iter_mut().enumerate() {
                if !*taken && self.slot_group_live(self.backward[i].slot, &live) {
                    *taken = true;
                    progressed = true;
                    let target = self.backward[i].target;
                    self.mark_value(target, &mut stack, &mut marked);
                }
            }
            if !progressed {
                break live;
            }
        };
        let hints = std::mem::take(&mut self.hints);
        let etr_marked = self.etr_mark(&hints, true)?;
        self.metrics.mark_ns += nanos(t.elapsed());

        // Precompact.
        let t = Instant::now();
        self.h2.retire_cursors(&live);
        let checkpoint = self.h2.checkpoint();
        let layout = self.h1.layout;
        let mut moves = Vec::new();
        let mut compact_top = layout.old_base;
        for (lo, hi) in self.h1.extents() {
            let mut a = lo;
            while a < hi {
                let size = self.descriptor_at(a)?.size();
                if self.h1.is_marked(a) {
                    if TcWord::decode(self.h1.load(a + WORD)).marked {
                        moves.push(Move { src: a, dst: 0, size, to_h2: true });
                    } else {
                        moves.push(Move { src: a, dst: compact_top, size, to_h2: false });
                        compact_top += size;
                    }
                }
                a += size;
            }
        }
        if compact_top > layout.old_end {
            self.h1.clear_marks();
            return Err(HeapError::HeapExhausted {
                space: "old generation",
                needed: compact_top - layout.old_base,
                available: layout.old_end - layout.old_base,
            });
        }
        for m in moves.iter_mut() {
            if m.to_h2 {
                let pid = TcWord::decode(self.h1.load(m.src + WORD)).partition;
                match self.h2.reserve(pid, m.size) {
                    Ok(d) => m.dst = d,
                    Err(e) => {
                        self.h2.restore(checkpoint);
                        self.h1.clear_marks();
                        return Err(e);
                    }
                }
            }
        }
        drop(checkpoint);
        for m in &moves {
            let w0 = self.h1.load(m.src);
            self.h1.store(m.src, with_forwarding(w0, m.dst));
        }
        let mut root_vals: Vec<u64> = self.roots.values().collect();
        for v in &mut root_vals {
            *v = self.forwarded(*v)?;
        }
        for (slot, v) in self.roots.values_mut().zip(root_vals) {
            *slot = v;
        }
        for m in &moves {
            let desc = self.descriptor_at(m.src)?.clone();
            for (off, _) in desc.reference_offsets() {
                let slot = m.src + off as u64;
                let v = self.h1.load(slot);
                let nv = self.forwarded(v)?;
                if nv != v {
                    self.h1.store(slot, nv);
                }
            }
        }
        let mut adjusted = Vec::new();
        for (i, e) in self.backward.iter().enumerate() {
            if taken[i] {
                adjusted.push((i, self.forwarded(e.target)?));
            }
        }
        self.metrics.precompact_ns += nanos(t.elapsed());

        // Compact.
        let t = Instant::now();
        let old_top_before = self.h1.old_top;
        self.h1.old_starts.clear();
        let mut writer = ImageWriter::new(&self.strategy, &mut self.h2);
        let mut moved = 0u64;
        let mut moved_bytes = 0u64;
        let mut slid = 0u64;
        let mut merges = 0u64;
        let mut buf = Vec::new();
        for m in &moves {
            if m.to_h2 {
                let desc = self.descriptor_at(m.src)?.clone();
                let words = self.h1.words(m.src, m.size);
                buf.clear();
                buf.extend_from_slice(&clear_forwarding(words[0]).to_le_bytes());
                for w in &words[1..] {
                    buf.extend_from_slice(&w.to_le_bytes());
                }
                writer.write(&mut self.h2, m.dst, &buf)?;
                self.h2.record_start(m.dst);
                self.h2.dirty_card(m.dst);
                let region = self.h2.region_of(m.dst);
                self.h2.set_used(region);
                for (off, _) in desc.reference_offsets() {
                    let v = words[(off as u64 / WORD) as usize];
                    if self.h2.contains(v) {
                        let other = self.h2.region_of(v);
                        if other != region && self.h2.merge_groups(region, other) {
                            merges += 1;
                        }
                    }
                }
                moved += 1;
                moved_bytes += m.size;
            } else {
                if m.src != m.dst {
                    self.h1.move_words(m.src, m.dst, m.size);
                    slid += m.size;
                }
                let w0 = self.h1.load(m.dst);
                self.h1.store(m.dst, clear_forwarding(w0));
                self.h1.old_starts.record(m.dst - layout.old_base);
            }
        }
        let flush_ops = writer.finish()?;
        let h1 = &mut self.h1;
        h1.zero(compact_top, old_top_before.max(compact_top));
        h1.old_top = compact_top;
        h1.zero(layout.young_base, h1.eden_top);
        h1.zero(h1.from_space, h1.from_top);
        h1.eden_top = layout.young_base;
        h1.from_top = h1.from_space;
        h1.cards.clear();
        self.metrics.compact_ns += nanos(t.elapsed());

        // Adjust backward references.
        let t = Instant::now();
        for &(i, nv) in &adjusted {
            let slot = self.backward[i].slot;
            self.h2.store(slot, nv);
            self.backward[i].target = nv;
        }
        self.metrics.adjust_ns += nanos(t.elapsed());

        let reclaim = self.h2.reclaim_free_regions();
        if !reclaim.freed.is_empty() {
            let freed: HashSet<usize> = reclaim.freed.iter().copied().collect();
            let h2 = &self.h2;
            self.backward.retain(|e| !freed.contains(&h2.region_of(e.slot)));
        }
        self.h1.clear_marks();

        let old_after = self.h1.old_used();
        let m = &mut self.metrics;
        m.major_collections += 1;
        m.objects_marked += marked;
        m.etr_marked += etr_marked;
        m.objects_moved_to_h2 += moved;
        m.bytes_moved_to_h2 += moved_bytes;
        m.bytes_copied += slid;
        m.h2_flush_ops += flush_ops;
        m.group_merges += merges;
        m.regions_freed += reclaim.freed.len() as u64;
        m.reclaim_ops += reclaim.ops;
        m.old_bytes_before_major += old_before;
        let reclaimed = old_before.saturating_sub(old_after);
        m.old_bytes_reclaimed += reclaimed;
        if old_before > 0 {
            m.reclaimed_fraction_sum += reclaimed as f64 / old_before as f64;
        }
        m.major_ns += nanos(start.elapsed());

        let stats = MajorStats {
            marked,
            etr_marked,
            objects_moved_to_h2: moved,
            bytes_moved_to_h2: moved_bytes,
            flush_ops,
            regions_freed: reclaim.freed,
            reclaim_ops: reclaim.ops,
            old_used_before: old_before,
            old_used_after: old_after,
            adjusted_backward_refs: adjusted.len() as u64,
        };
        self.notify(Collection::Major(&stats));
        Ok(stats)
    }
}
