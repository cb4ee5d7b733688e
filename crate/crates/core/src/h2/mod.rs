//! The second heap: a mapped, region-organized space for cached objects.
//!
//! H2 is never traced. Liveness is tracked per region with a USED bit set
//! by the H1 marker, regions that reference each other are merged into
//! groups that are freed together, and H2-to-H1 pointers are found by
//! scanning dirty cards.

mod backing;
mod card;
mod region;

pub use backing::BackingKind;
pub use card::H2CardTable;
pub use region::{GroupTable, Region};

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{HeapError, Result};
use crate::object::{class_of, ClassRegistry, WORD};
use crate::starts::StartTable;
use backing::{Backing, Sink};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct H2Config {
    #[serde(deserialize_with = "crate::config::de_size")]
    pub size: u64,
    #[serde(default = "default_region", deserialize_with = "crate::config::de_size")]
    pub region_size: u64,
    #[serde(default = "default_card", deserialize_with = "crate::config::de_size")]
    pub card_segment: u64,
    #[serde(default = "default_stripe", deserialize_with = "crate::config::de_size")]
    pub stripe_size: u64,
    #[serde(default = "default_threads")]
    pub scan_threads: usize,
    #[serde(default)]
    pub backing: BackingKind,
}

fn default_region() -> u64 {
    8 << 20
}
fn default_card() -> u64 {
    8 << 10
}
fn default_stripe() -> u64 {
    4 << 20
}
fn default_threads() -> usize {
    4
}

impl Default for H2Config {
    fn default() -> Self {
        H2Config {
            size: 1 << 30,
            region_size: default_region(),
            card_segment: default_card(),
            stripe_size: default_stripe(),
            scan_threads: default_threads(),
            backing: BackingKind::default(),
        }
    }
}

impl H2Config {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HeapError::Config(m));
        for (name, v) in [
            ("h2.size", self.size),
            ("h2.region_size", self.region_size),
            ("h2.card_segment", self.card_segment),
            ("h2.stripe_size", self.stripe_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !self.card_segment.is_multiple_of(WORD) {
            return fail(format!("h2.card_segment ({}) must be a multiple of 8", self.card_segment));
        }
        if !self.stripe_size.is_multiple_of(self.card_segment) {
            return fail(format!(
                "h2.stripe_size ({}) must be a multiple of h2.card_segment ({})",
                self.stripe_size, self.card_segment
            ));
        }
        if !self.region_size.is_multiple_of(self.stripe_size) {
            return fail(format!(
                "h2.region_size ({}) must be a multiple of h2.stripe_size ({})",
                self.region_size, self.stripe_size
            ));
        }
        if !self.size.is_multiple_of(self.region_size) {
            return fail(format!(
                "h2.size ({}) must be a multiple of h2.region_size ({})",
                self.size, self.region_size
            ));
        }
        if self.scan_threads == 0 {
            return fail("h2.scan_threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        (self.size / self.region_size) as usize
    }
}

/// A backward reference: an H2 slot holding an H1 address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BackwardRef {
    pub slot: u64,
    pub target: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScanOutput {
    pub refs: Vec<BackwardRef>,
    /// Dirty cards visited.
    pub cards_scanned: u64,
    pub cards_cleaned: u64,
    /// Dirty boundary cards visited.
    pub boundary_dirty: u64,
    /// Dirty boundary cards left dirty although their segment had no
    /// backward references.
    pub boundary_retained: u64,
    /// Segment bytes covered by the objects walked, clipped to each segment.
    pub bytes_walked: u64,
}

impl ScanOutput {
    fn absorb(&mut self, other: ScanOutput) {
        self.refs.extend(other.refs);
        self.cards_scanned += other.cards_scanned;
        self.cards_cleaned += other.cards_cleaned;
        self.boundary_dirty += other.boundary_dirty;
        self.boundary_retained += other.boundary_retained;
        self.bytes_walked += other.bytes_walked;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReclaimOutput {
    pub freed: Vec<usize>,
    /// Primitive metadata operations performed (liveness checks, offset
    /// resets, card cleans, group record releases).
    pub ops: u64,
}

/// Allocation metadata snapshot used to roll back a failed transfer.
#[derive(Clone)]
pub(crate) struct Checkpoint {
    regions: Vec<Region>,
    groups: GroupTable,
    free: BTreeSet<usize>,
    cursors: HashMap<u32, usize>,
}

pub struct H2Heap {
    cfg: H2Config,
    base: u64,
    backing: Backing,
    regions: Vec<Region>,
    groups: GroupTable,
    cards: H2CardTable,
    starts: StartTable,
    free: BTreeSet<usize>,
    cursors: HashMap<u32, usize>,
}

impl H2Heap {
    pub fn new(cfg: H2Config, base: u64) -> Result<Self> {
        cfg.validate()?;
        let backing = Backing::open(&cfg.backing, cfg.size)?;
        let n = cfg.regions();
        let cards = H2CardTable::new(cfg.size, cfg.card_segment, cfg.stripe_size, cfg.scan_threads);
        let starts = StartTable::new(cards.len(), cfg.card_segment);
        Ok(H2Heap {
            base,
            backing,
            regions: (0..n).map(Region::new).collect(),
            groups: GroupTable::default(),
            cards,
            starts,
            free: (0..n).collect(),
            cursors: HashMap::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &H2Config {
        &self.cfg
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn end(&self) -> u64 {
        self.base + self.cfg.size
    }

    #[inline]
    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    #[inline]
    pub fn region_of(&self, addr: u64) -> usize {
        ((addr - self.base) / self.cfg.region_size) as usize
    }

    pub fn region_start(&self, region: usize) -> u64 {
        self.base + region as u64 * self.cfg.region_size
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, index: usize) -> &Region {
        &self.regions[index]
    }

    pub fn cards(&self) -> &H2CardTable {
        &self.cards
    }

    pub fn is_file_backed(&self) -> bool {
        self.backing.is_file()
    }

    /// Raw image bytes.
    pub fn image(&self) -> &[u8] {
        self.backing.bytes()
    }

    pub fn free_region_count(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.regions.iter().map(|r| r.alloc_offset).sum()
    }

    /// Extents `[start, start + alloc_offset)` of every assigned region.
    pub fn allocated_extents(&self) -> Vec<(u64, u64)> {
        self.regions
            .iter()
            .filter(|r| r.is_assigned())
            .map(|r| {
                let s = self.region_start(r.index);
                (s, s + r.alloc_offset)
            })
            .collect()
    }

    /// True if `addr` lies inside the allocated part of an assigned region.
    pub fn is_allocated(&self, addr: u64) -> bool {
        if !self.contains(addr) {
            return false;
        }
        let r = &self.regions[self.region_of(addr)];
        r.is_assigned() && addr < self.region_start(r.index) + r.alloc_offset
    }

    #[inline]
    pub fn load(&self, addr: u64) -> u64 {
        let off = (addr - self.base) as usize;
        u64::from_le_bytes(self.backing.bytes()[off..off + 8].try_into().unwrap())
    }

    #[inline]
    pub fn store(&mut self, addr: u64, value: u64) {
        let off = (addr - self.base) as usize;
        self.backing.bytes_mut()[off..off + 8].copy_from_slice(&value.to_le_bytes());
    }

    pub fn bytes(&self, addr: u64, len: u64) -> &[u8] {
        let off = (addr - self.base) as usize;
        &self.backing.bytes()[off..off + len as usize]
    }

    pub fn write_bytes(&mut self, addr: u64, data: &[u8]) {
        let off = (addr - self.base) as usize;
        self.backing.bytes_mut()[off..off + data.len()].copy_from_slice(data);
    }

    pub(crate) fn sink(&mut self) -> Sink {
        self.backing.sink()
    }

    /// Bump-allocates `size` bytes in the region bound to `partition`,
    /// opening a fresh region when the current one cannot fit the request.
    /// The memory is zeroed.
    pub fn allocate_in_region(&mut self, partition: u32, size: u64) -> Result<u64> {
        let addr = self.reserve(partition, size)?;
        self.record_start(addr);
        let zeros = vec![0u8; size as usize];
        self.write_bytes(addr, &zeros);
        Ok(addr)
    }

    /// Like `allocate_in_region` but neither records the object start nor
    /// touches the image.
    pub(crate) fn reserve(&mut self, partition: u32, size: u64) -> Result<u64> {
        let rs = self.cfg.region_size;
        if size > rs || size == 0 {
            return Err(HeapError::RegionExhausted { partition, size });
        }
        if let Some(&r) = self.cursors.get(&partition) {
            let region = &mut self.regions[r];
            if region.alloc_offset + size <= rs {
                let addr = self.base + r as u64 * rs + region.alloc_offset;
                region.alloc_offset += size;
                return Ok(addr);
            }
        }
        let r = self.free.pop_first().ok_or(HeapError::RegionExhausted { partition, size })?;
        let gid = self.groups.create(r);
        let region = &mut self.regions[r];
        region.partition = Some(partition);
        region.group = Some(gid);
        region.alloc_offset = size;
        self.cursors.insert(partition, r);
        Ok(self.base + r as u64 * rs)
    }

    pub(crate) fn record_start(&mut self, addr: u64) {
        self.starts.record(addr - self.base);
    }

    /// Unbinds partitions from regions whose group is not in `live`, so that
    /// new objects never land in a group about to be freed.
    pub(crate) fn retire_cursors(&mut self, live: &std::collections::HashSet<usize>) {
        let (groups, regions) = (&self.groups, &self.regions);
        self.cursors
            .retain(|_, r| regions[*r].group.is_some_and(|g| live.contains(&groups.find(g))));
    }

    pub(crate) fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            regions: self.regions.clone(),
            groups: self.groups.clone(),
            free: self.free.clone(),
            cursors: self.cursors.clone(),
        }
    }

    pub(crate) fn restore(&mut self, cp: Checkpoint) {
        self.regions = cp.regions;
        self.groups = cp.groups;
        self.free = cp.free;
        self.cursors = cp.cursors;
    }

    #[inline]
    pub fn dirty_card(&self, addr: u64) {
        self.cards.dirty(self.cards.index_of(addr - self.base));
    }

    pub fn card_of(&self, addr: u64) -> usize {
        self.cards.index_of(addr - self.base)
    }

    pub fn clear_used(&mut self) {
        for r in &mut self.regions {
            r.used = false;
        }
    }

    /// Sets the USED bit; returns true if it was clear.
    pub fn set_used(&mut self, region: usize) -> bool {
        let r = &mut self.regions[region];
        let fresh = !r.used;
        r.used = true;
        fresh
    }

    /// Group root id of an assigned region.
    pub fn group_of(&self, region: usize) -> Option<usize> {
        self.regions[region].group.map(|g| self.groups.find(g))
    }

    pub fn group_members(&self, region: usize) -> Vec<usize> {
        match self.regions[region].group {
            Some(g) => self.groups.members(g),
            None => Vec::new(),
        }
    }

    pub fn group_link_ops(&self) -> u64 {
        self.groups.link_ops
    }

    /// Puts two assigned regions in one group.
    pub fn merge_groups(&mut self, src: usize, dst: usize) -> bool {
        match (self.regions[src].group, self.regions[dst].group) {
            (Some(a), Some(b)) => self.groups.union(a, b),
            _ => false,
        }
    }

    /// Frees every group none of whose members is USED.
    pub fn reclaim_free_regions(&mut self) -> ReclaimOutput {
        let mut ops = 0u64;
        let mut live_roots = BTreeSet::new();
        let mut candidates = BTreeSet::new();
        for r in &self.regions {
            ops += 1;
            if let Some(g) = r.group {
                let root = self.groups.find(g);
                if r.used {
                    live_roots.insert(root);
                } else {
                    candidates.insert(root);
                }
            }
        }
        let mut freed = Vec::new();
        for root in candidates.difference(&live_roots).copied().collect::<Vec<_>>() {
            let members = self.groups.dissolve(root);
            ops += members.len() as u64;
            for idx in members {
                ops += self.reset_region(idx);
                freed.push(idx);
            }
        }
        freed.sort_unstable();
        ReclaimOutput { freed, ops }
    }

    fn reset_region(&mut self, idx: usize) -> u64 {
        let cards_per_region = (self.cfg.region_size / self.cfg.card_segment) as usize;
        let lo = idx * cards_per_region;
        for c in lo..lo + cards_per_region {
            self.cards.reset(c);
        }
        self.starts.clear_range(lo..lo + cards_per_region);
        let r = &mut self.regions[idx];
        r.alloc_offset = 0;
        r.used = false;
        r.group = None;
        if let Some(p) = r.partition.take() {
            if self.cursors.get(&p) == Some(&idx) {
                self.cursors.remove(&p);
            }
        }
        self.free.insert(idx);
        3 + cards_per_region as u64
    }

    /// Scans the stripes owned by `thread`, collecting backward references
    /// out of dirty cards and cleaning cards that yield none.
    pub fn scan_dirty_cards(
        &self,
        thread: usize,
        classes: &ClassRegistry,
        h1: Range<u64>,
    ) -> Result<ScanOutput> {
        let mut out = ScanOutput::default();
        for card in self.cards.stripe_cards(thread) {
            if !self.cards.is_dirty(card) {
                continue;
            }
            out.cards_scanned += 1;
            let boundary = self.cards.is_boundary(card);
            if boundary {
                out.boundary_dirty += 1;
            }
            let before = out.refs.len();
            self.scan_segment(card, classes, &h1, &mut out)?;
            if out.refs.len() == before {
                if self.cards.clean_scanned(card) {
                    out.cards_cleaned += 1;
                } else {
                    out.boundary_retained += 1;
                }
            }
        }
        Ok(out)
    }

    /// Runs `scan_dirty_cards` for every thread id, in parallel when more
    /// than one scan thread is configured. The merged reference list is
    /// sorted by slot and deduplicated.
    pub fn scan_all(&self, classes: &ClassRegistry, h1: Range<u64>) -> Result<ScanOutput> {
        let threads = self.cards.threads();
        let parts: Vec<Result<ScanOutput>> = if threads == 1 {
            vec![self.scan_dirty_cards(0, classes, h1)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..threads)
                    .map(|t| {
                        let h1 = h1.clone();
                        s.spawn(move || self.scan_dirty_cards(t, classes, h1))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("scan thread panicked")).collect()
            })
        };
        let mut out = ScanOutput::default();
        for p in parts {
            out.absorb(p?);
        }
        out.refs.sort_unstable();
        out.refs.dedup();
        Ok(out)
    }

    fn object_size(&self, addr: u64, classes: &ClassRegistry) -> Result<u64> {
        let id = class_of(self.load(addr));
        classes.get(id).map(|d| d.size()).ok_or_else(|| HeapError::Corruption {
            addr,
            reason: format!("unknown {id} in H2 object header"),
        })
    }

    fn scan_segment(
        &self,
        card: usize,
        classes: &ClassRegistry,
        h1: &Range<u64>,
        out: &mut ScanOutput,
    ) -> Result<()> {
        let seg = self.cfg.card_segment;
        let cards_per_region = (self.cfg.region_size / seg) as usize;
        let region = card / cards_per_region;
        let r = &self.regions[region];
        if !r.is_assigned() {
            return Ok(());
        }
        let region_lo = region as u64 * self.cfg.region_size;
        let alloc_end = region_lo + r.alloc_offset;
        let seg_lo = card as u64 * seg;
        let hi = (seg_lo + seg).min(alloc_end);
        if seg_lo >= hi {
            return Ok(());
        }
        let first = self
            .starts
            .start_before(card, region * cards_per_region)
            .or_else(|| self.starts.first_in(card));
        let Some(mut cur) = first else {
            return Ok(());
        };
        while cur < hi {
            let addr = self.base + cur;
            let desc = classes.get(class_of(self.load(addr))).ok_or_else(|| HeapError::Corruption {
                addr,
                reason: format!("unparseable object in card {card}"),
            })?;
            let size = desc.size();
            if cur + size > seg_lo {
                out.bytes_walked += (cur + size).min(hi) - cur.max(seg_lo);
                for (off, _) in desc.reference_offsets() {
                    let v = self.load(addr + off as u64);
                    if h1.contains(&v) {
                        out.refs.push(BackwardRef { slot: addr + off as u64, target: v });
                    }
                }
            }
            cur += size;
        }
        Ok(())
    }

    /// Walks every object in every assigned region in address order.
    pub fn for_each_object(
        &self,
        classes: &ClassRegistry,
        mut f: impl FnMut(u64),
    ) -> Result<()> {
        for (lo, hi) in self.allocated_extents() {
            let mut a = lo;
            while a < hi {
                f(a);
                a += self.object_size(a, classes)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object::{make_word0, FieldSpec};

    const BASE: u64 = 1 << 32;

    fn small() -> H2Config {
        H2Config {
            size: 4 << 20,
            region_size: 1 << 20,
            card_segment: 8 << 10,
            stripe_size: 64 << 10,
            scan_threads: 2,
            backing: BackingKind::Anonymous,
        }
    }

    fn write_obj(h: &mut H2Heap, addr: u64, class: &crate::object::ClassDescriptor, refs: &[u64]) {
        h.store(addr, make_word0(class.class_id, 0));
        for (i, (off, _)) in class.reference_offsets().enumerate() {
            h.store(addr + off as u64, refs.get(i).copied().unwrap_or(0));
        }
    }

    #[test]
    fn first_allocation_opens_first_region() {
        let mut h = H2Heap::new(small(), BASE).unwrap();
        let a = h.allocate_in_region(7, 64).unwrap();
        assert_eq!(a, BASE);
        assert_eq!(h.region(0).partition, Some(7));
        assert!(h.is_allocated(a));
        assert!(!h.is_allocated(a + 64));
    }

    #[test]
    fn full_region_opens_next() {
        let cfg = small();
        let mut h = H2Heap::new(cfg.clone(), BASE).unwrap();
        let size = 64;
        h.allocate_in_region(1, cfg.region_size - size + 8).unwrap();
        let before = h.region(0).alloc_offset;
        let b = h.allocate_in_region(1, size).unwrap();
        assert_eq!(h.region_of(b), 1);
        assert_eq!(h.region(0).alloc_offset, before);
    }

    #[test]
    fn oversized_request_is_region_exhausted() {
        let cfg = small();
        let mut h = H2Heap::new(cfg.clone(), BASE).unwrap();
        assert!(matches!(
            h.allocate_in_region(0, cfg.region_size + 8),
            Err(HeapError::RegionExhausted { .. })
        ));
        for _ in 0..4 {
            h.allocate_in_region(0, cfg.region_size).unwrap();
        }
        assert!(h.allocate_in_region(0, 8).is_err());
    }

    #[test]
    fn dirty_card_floor_division() {
        let h = H2Heap::new(small(), BASE).unwrap();
        h.dirty_card(BASE);
        assert!(h.cards().is_dirty(0));
        h.dirty_card(BASE + 5 * (8 << 10) + 1);
        assert!(h.cards().is_dirty(5));
        h.dirty_card(BASE + 5 * (8 << 10) + 9);
        assert_eq!(h.cards().dirty_count(), 2);
    }

    #[test]
    fn used_bits_and_reclaim() {
        let mut h = H2Heap::new(small(), BASE).unwrap();
        let a = h.allocate_in_region(1, 64).unwrap();
        h.allocate_in_region(2, 64).unwrap();
        h.allocate_in_region(3, 64).unwrap();
        h.merge_groups(0, 1);
        assert_eq!(h.group_members(1), vec![0, 1]);
        h.set_used(1);
        assert!(!h.set_used(1));
        let out = h.reclaim_free_regions();
        assert_eq!(out.freed, vec![2]);
        assert!(h.is_allocated(a));
        h.clear_used();
        let out = h.reclaim_free_regions();
        assert_eq!(out.freed, vec![0, 1]);
        assert_eq!(h.region(0).alloc_offset, 0);
        assert_eq!(h.region(0).partition, None);
        assert_eq!(h.free_region_count(), 4);
    }

    #[test]
    fn reclaim_cleans_boundary_cards() {
        let mut h = H2Heap::new(small(), BASE).unwrap();
        h.allocate_in_region(1, 64).unwrap();
        h.dirty_card(BASE);
        let out = h.reclaim_free_regions();
        assert_eq!(out.freed, vec![0]);
        assert_eq!(h.cards().dirty_count(), 0);
    }

    #[test]
    fn scan_finds_backward_ref_and_keeps_card() {
        let mut reg = ClassRegistry::new();
        let node = reg.register(vec![FieldSpec::reference(16), FieldSpec::scalar(24)]).unwrap();
        let plain = reg.register(vec![FieldSpec::scalar(16)]).unwrap();
        let mut h = H2Heap::new(small(), BASE).unwrap();
        let h1 = 0x1000..0x10_0000u64;
        // Push the objects off the first (boundary) card.
        h.allocate_in_region(1, 8 << 10).unwrap();
        let a = h.allocate_in_region(1, node.size()).unwrap();
        write_obj(&mut h, a, &node, &[0x2000]);
        let b = h.allocate_in_region(1, 8 << 10).unwrap();
        let c = h.allocate_in_region(1, plain.size()).unwrap();
        write_obj(&mut h, c, &plain, &[]);
        assert_eq!(h.card_of(a), 1);
        assert_eq!(h.card_of(c), 2);
        let _ = b;
        // Filler objects need a parseable header too.
        let filler = reg.register(FieldSpec::packed(&vec![(crate::object::FieldKind::Scalar, false); 1022])).unwrap();
        assert_eq!(filler.size(), 8 << 10);
        write_obj(&mut h, BASE, &filler, &[]);
        write_obj(&mut h, b, &filler, &[]);
        h.dirty_card(a);
        h.dirty_card(c);
        let out = h.scan_all(&reg, h1).unwrap();
        assert_eq!(out.refs, vec![BackwardRef { slot: a + 16, target: 0x2000 }]);
        assert_eq!(out.cards_scanned, 2);
        assert!(h.cards().is_dirty(1));
        assert!(!h.cards().is_dirty(2));
        // Boundary card with nothing in it stays dirty.
        h.dirty_card(BASE);
        let out = h.scan_all(&reg, 0x1000..0x10_0000).unwrap();
        assert_eq!(out.boundary_retained, 1);
        assert!(h.cards().is_dirty(0));
    }

    #[test]
    fn clean_scan_is_empty() {
        let reg = ClassRegistry::new();
        let h = H2Heap::new(small(), BASE).unwrap();
        let out = h.scan_all(&reg, 0..1).unwrap();
        assert_eq!(out, ScanOutput::default());
    }

    #[test]
    fn validation_names_both_fields() {
        let mut c = small();
        c.stripe_size = 12 << 10;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("h2.stripe_size") && msg.contains("h2.card_segment"), "{msg}");
    }

    #[test]
    fn file_backing_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.backing = BackingKind::File(dir.path().join("h2.img"));
        let mut h = H2Heap::new(cfg, BASE).unwrap();
        assert!(h.is_file_backed());
        let a = h.allocate_in_region(0, 32).unwrap();
        h.store(a + 16, 42);
        assert_eq!(h.load(a + 16), 42);
        let sink = h.sink();
        sink.write_at(24, &7u64.to_le_bytes()).unwrap();
        assert_eq!(h.load(a + 24), 7);
    }
}
