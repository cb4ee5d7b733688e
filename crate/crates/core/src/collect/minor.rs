//! Copying collection of the young generation.
//!
//! Roots are the root slots, objects on dirty old-generation cards, and
//! backward references found by scanning dirty H2 cards. Survivors go to the
//! to-space, or to the old generation once they reach the tenuring age or
//! the to-space is full.

use std::time::Instant;

use crate::error::{HeapError, Result};
use crate::h1::H1Heap;
use crate::metrics::{nanos, MinorStats};
use crate::object::{age_of, class_of, clear_forwarding, forwarding_of, with_age, with_forwarding, ClassRegistry};
use crate::runtime::{Collection, Runtime};

struct Scavenger<'a> {
    classes: &'a ClassRegistry,
    h1: &'a mut H1Heap,
    to_top: u64,
    to_end: u64,
    tenure_age: u8,
    survivors: u64,
    promoted: u64,
    bytes: u64,
}

impl Scavenger<'_> {
    fn size_at(&self, addr: u64) -> Result<u64> {
        let id = class_of(self.h1.load(addr));
        self.classes.get(id).map(|d| d.size()).ok_or_else(|| HeapError::Corruption {
            addr,
            reason: format!("unknown {id} during scavenge"),
        })
    }

    /// Returns the post-collection address of the object `v` points to.
    fn forward(&mut self, v: u64) -> Result<u64> {
        if v == 0 || !self.h1.layout.in_young(v) {
            return Ok(v);
        }
        let w0 = self.h1.load(v);
        if let Some(f) = forwarding_of(w0) {
            return Ok(f);
        }
        let size = self.size_at(v)?;
        let age = age_of(w0).saturating_add(1);
        let dst = if age >= self.tenure_age || self.to_top + size > self.to_end {
            let a = self.h1.bump_old(size).ok_or(HeapError::HeapExhausted {
                space: "old generation",
                needed: size,
                available: self.h1.old_free(),
            })?;
            self.promoted += 1;
            a
        } else {
            let a = self.to_top;
            self.to_top += size;
            a
        };
        self.h1.move_words(v, dst, size);
        self.h1.store(dst, with_age(clear_forwarding(w0), age));
        self.h1.store(v, with_forwarding(w0, dst));
        self.survivors += 1;
        self.bytes += size;
        Ok(dst)
    }

    /// Forwards every reference field of the object at `obj`. Returns true if
    /// any field still points into the young generation afterwards.
    fn scan_object(&mut self, obj: u64) -> Result<(u64, bool)> {
        let id = class_of(self.h1.load(obj));
        let desc = self.classes.get(id).ok_or_else(|| HeapError::Corruption {
            addr: obj,
            reason: format!("unknown {id} during scavenge"),
        })?;
        let mut young = false;
        for (off, _) in desc.reference_offsets() {
            let slot = obj + off as u64;
            let v = self.h1.load(slot);
            let nv = self.forward(v)?;
            if nv != v {
                self.h1.store(slot, nv);
            }
            young |= self.h1.layout.in_young(nv);
        }
        Ok((desc.size(), young))
    }
}

impl Runtime {
    fn promotion_guaranteed(&self) -> bool {
        self.h1.old_free() >= self.h1.young_used()
    }

    /// Collects the young generation. If the old generation cannot take a
    /// worst-case promotion, a major collection runs instead.
    pub fn minor_collect(&mut self) -> Result<MinorStats> {
        if !self.promotion_guaranteed() {
            self.major_collect_inner(false)?;
            return Ok(MinorStats { escalated: true, ..MinorStats::default() });
        }
        self.scavenge()
    }

    /// Rebuilds the backward-reference stack from the dirty H2 cards.
    pub(crate) fn refresh_backward_refs(&mut self) -> Result<u64> {
        let scan = self.h2.scan_all(&self.classes, self.h1_range())?;
        let m = &mut self.metrics;
        m.h2_cards_scanned += scan.cards_scanned;
        m.h2_cards_cleaned += scan.cards_cleaned;
        m.h2_boundary_dirty += scan.boundary_dirty;
        m.h2_boundary_retained += scan.boundary_retained;
        m.h2_bytes_walked += scan.bytes_walked;
        m.backward_refs_found += scan.refs.len() as u64;
        self.last_scan = Some(crate::h2::ScanOutput { refs: Vec::new(), ..scan.clone() });
        self.backward = scan.refs;
        Ok(scan.cards_scanned)
    }

    pub(crate) fn scavenge(&mut self) -> Result<MinorStats> {
        let start = Instant::now();
        let h2_cards = self.refresh_backward_refs()?;
        let old_top_before = self.h1.old_top;
        let to_start = self.h1.to_space();
        let mut sc = Scavenger {
            classes: &self.classes,
            to_top: to_start,
            to_end: to_start + self.h1.layout.survivor_size,
            tenure_age: self.h1.cfg.tenuring_threshold,
            h1: &mut self.h1,
            survivors: 0,
            promoted: 0,
            bytes: 0,
        };

        for v in self.roots.values_mut() {
            *v = sc.forward(*v)?;
        }

        let mut h1_cards = 0;
        let dirty: Vec<usize> = sc.h1.cards.dirty_cards().collect();
        for card in dirty {
            sc.h1.cards.clean(card);
            h1_cards += 1;
            let card_end = sc.h1.cards.card_start(card) + sc.h1.cards.segment();
            let Some(rel) = sc.h1.old_starts.first_in(card) else { continue };
            let mut obj = sc.h1.layout.old_base + rel;
            while obj < card_end && obj < old_top_before {
                let (size, young) = sc.scan_object(obj)?;
                if young {
                    sc.h1.cards.dirty(obj);
                }
                obj += size;
            }
        }

        for e in &mut self.backward {
            if sc.h1.layout.in_young(e.target) {
                let nv = sc.forward(e.target)?;
                self.h2.store(e.slot, nv);
                e.target = nv;
            }
        }

        let (mut scan_to, mut scan_old) = (to_start, old_top_before);
        loop {
            let mut progressed = false;
            while scan_to < sc.to_top {
                let (size, _) = sc.scan_object(scan_to)?;
                scan_to += size;
                progressed = true;
            }
            while scan_old < sc.h1.old_top {
                let (size, young) = sc.scan_object(scan_old)?;
                if young {
                    sc.h1.cards.dirty(scan_old);
                }
                scan_old += size;
                progressed = true;
            }
            if !progressed {
                break;
            }
        }

        // Persist hints are weak: drop those whose root died.
        let young_base = sc.h1.layout.young_base;
        let mut hints = std::mem::take(&mut self.hints);
        hints.retain_mut(|h| {
            if !sc.h1.layout.in_young(h.root) {
                return true;
            }
            match forwarding_of(sc.h1.load(h.root)) {
                Some(f) => {
                    h.root = f;
                    true
                }
                None => false,
            }
        });
        self.hints = hints;

        let stats = MinorStats {
            survivors: sc.survivors,
            promoted: sc.promoted,
            bytes_copied: sc.bytes,
            h1_cards_scanned: h1_cards,
            h2_cards_scanned: h2_cards,
            backward_refs: self.backward.len() as u64,
            escalated: false,
        };
        let to_top = sc.to_top;
        let h1 = &mut self.h1;
        h1.zero(young_base, h1.eden_top);
        h1.zero(h1.from_space, h1.from_top);
        h1.eden_top = young_base;
        h1.from_space = to_start;
        h1.from_top = to_top;

        let m = &mut self.metrics;
        m.minor_collections += 1;
        m.objects_copied += stats.survivors - stats.promoted;
        m.objects_promoted += stats.promoted;
        m.bytes_copied += stats.bytes_copied;
        m.h1_cards_scanned += h1_cards;
        m.minor_ns += nanos(start.elapsed());
        self.notify(Collection::Minor(&stats));
        Ok(stats)
    }
}
