//! The runtime: both heaps, the class table, roots and collector state.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{HeapError, Result};
use crate::h1::{H1Config, H1Heap};
use crate::h2::{BackwardRef, H2Config, H2Heap, ScanOutput};
use crate::metrics::{GcMetrics, MajorStats, MinorStats};
use crate::migration::{MigrationPolicy, PersistHint, WriteStrategy};
use crate::object::{
    class_of, make_word0, ClassDescriptor, ClassId, ClassRegistry, FieldSpec, ObjectHandle,
    ObjectHeader, Space, MAX_ADDRESS, WORD,
};

/// Index of a root slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RootSlot(pub usize);

/// Mutable root slots. A slot holds an address or zero for null.
#[derive(Clone, Debug, Default)]
pub struct RootSet {
    slots: Vec<Option<u64>>,
    free: Vec<usize>,
}

impl RootSet {
    pub fn add(&mut self, value: u64) -> RootSlot {
        match self.free.pop() {
            Some(i) => {
                self.slots[i] = Some(value);
                RootSlot(i)
            }
            None => {
                self.slots.push(Some(value));
                RootSlot(self.slots.len() - 1)
            }
        }
    }

    pub fn drop_slot(&mut self, slot: RootSlot) -> Result<()> {
        match self.slots.get_mut(slot.0) {
            Some(s @ Some(_)) => {
                *s = None;
                self.free.push(slot.0);
                Ok(())
            }
            _ => Err(HeapError::InvalidSlot(slot.0)),
        }
    }

    pub fn get(&self, slot: RootSlot) -> Result<u64> {
        self.slots.get(slot.0).copied().flatten().ok_or(HeapError::InvalidSlot(slot.0))
    }

    pub fn set(&mut self, slot: RootSlot, value: u64) -> Result<()> {
        match self.slots.get_mut(slot.0) {
            Some(Some(v)) => {
                *v = value;
                Ok(())
            }
            _ => Err(HeapError::InvalidSlot(slot.0)),
        }
    }

    /// Occupied slot values, in slot order.
    pub fn values(&self) -> impl Iterator<Item = u64> + '_ {
        self.slots.iter().flatten().copied()
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut u64> {
        self.slots.iter_mut().flatten()
    }

    pub fn len(&self) -> usize {
        self.slots.len() - self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gap between the end of the old generation and the H2 base, so that the
/// end of each space is not a valid address of the next one.
const H2_GUARD: u64 = 1 << 20;

pub struct Runtime {
    pub(crate) classes: ClassRegistry,
    pub(crate) h1: H1Heap,
    pub(crate) h2: H2Heap,
    pub(crate) roots: RootSet,
    pub(crate) backward: Vec<BackwardRef>,
    pub(crate) hints: Vec<PersistHint>,
    pub(crate) cache: BTreeMap<u32, RootSlot>,
    pub(crate) strategy: WriteStrategy,
    pub(crate) policy: MigrationPolicy,
    pub(crate) metrics: GcMetrics,
    /// Dirty the H2 card on scalar stores too.
    pub(crate) scalar_barrier: bool,
    pub(crate) last_scan: Option<ScanOutput>,
    observer: Option<Observer>,
}

/// A finished collection, as reported to an observer.
#[derive(Clone, Copy, Debug)]
pub enum Collection<'a> {
    Minor(&'a MinorStats),
    Major(&'a MajorStats),
}

/// Called after every collection with the heap in its post-collection state.
pub type Observer = Box<dyn FnMut(&Runtime, Collection<'_>) + Send>;

impl Runtime {
    pub fn new(h1: H1Config, h2: H2Config) -> Result<Self> {
        let h1 = H1Heap::new(h1)?;
        let h2_base = (h1.layout().old_end + H2_GUARD).next_multiple_of(H2_GUARD);
        if h2_base + h2.size > MAX_ADDRESS {
            return Err(HeapError::Config(format!(
                "combined heap span {:#x} exceeds the {:#x} addressable bytes",
                h2_base + h2.size,
                MAX_ADDRESS
            )));
        }
        let h2 = H2Heap::new(h2, h2_base)?;
        Ok(Runtime {
            classes: ClassRegistry::new(),
            h1,
            h2,
            roots: RootSet::default(),
            backward: Vec::new(),
            hints: Vec::new(),
            cache: BTreeMap::new(),
            strategy: WriteStrategy::default(),
            policy: MigrationPolicy::Etr,
            metrics: GcMetrics::default(),
            scalar_barrier: true,
            last_scan: None,
            observer: None,
        })
    }

    pub fn with_strategy(mut self, strategy: WriteStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_policy(mut self, policy: MigrationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_scalar_barrier(mut self, on: bool) -> Self {
        self.scalar_barrier = on;
        self
    }

    pub fn set_observer(&mut self, observer: Option<Observer>) {
        self.observer = observer;
    }

    pub(crate) fn notify(&mut self, c: Collection<'_>) {
        if let Some(mut f) = self.observer.take() {
            f(self, c);
            self.observer = Some(f);
        }
    }

    /// Counters of the most recent H2 card scan (references omitted).
    pub fn last_scan(&self) -> Option<&ScanOutput> {
        self.last_scan.as_ref()
    }

    pub fn register_class(&mut self, layout: Vec<FieldSpec>) -> Result<Arc<ClassDescriptor>> {
        self.classes.register(layout)
    }

    pub fn classes(&self) -> &ClassRegistry {
        &self.classes
    }

    pub fn class(&self, id: ClassId) -> Result<&Arc<ClassDescriptor>> {
        self.classes.get(id).ok_or(HeapError::UnknownClass(id))
    }

    pub fn h1(&self) -> &H1Heap {
        &self.h1
    }

    pub fn h2(&self) -> &H2Heap {
        &self.h2
    }

    pub fn h2_mut(&mut self) -> &mut H2Heap {
        &mut self.h2
    }

    pub fn metrics(&self) -> &GcMetrics {
        &self.metrics
    }

    pub fn roots(&self) -> &RootSet {
        &self.roots
    }

    /// Current backward-reference stack, as of the last card scan.
    pub fn backward_refs(&self) -> &[BackwardRef] {
        &self.backward
    }

    pub fn pending_hints(&self) -> &[PersistHint] {
        &self.hints
    }

    pub(crate) fn classify_addr(&self, addr: u64) -> Option<Space> {
        let l = self.h1.layout();
        if l.in_young(addr) {
            Some(Space::H1Young)
        } else if l.in_old(addr) {
            Some(Space::H1Old)
        } else if self.h2.contains(addr) {
            Some(Space::H2)
        } else {
            None
        }
    }

    /// Heap space whose address range contains `h`. This is the range check
    /// the write barrier performs; it does not validate the object itself.
    pub fn classify_handle(&self, h: ObjectHandle) -> Result<Space> {
        self.classify_addr(h.addr()).ok_or(HeapError::InvalidHandle(h.addr()))
    }

    /// Checks that `addr` lies in the allocated part of its space.
    pub(crate) fn check_object(&self, addr: u64) -> Result<Space> {
        let bad = HeapError::InvalidHandle(addr);
        if !addr.is_multiple_of(WORD) {
            return Err(bad);
        }
        let h1 = &self.h1;
        let l = h1.layout();
        let space = self.classify_addr(addr).ok_or(HeapError::InvalidHandle(addr))?;
        let ok = match space {
            Space::H1Young => {
                (addr >= l.young_base && addr < h1.eden_top)
                    || (addr >= h1.from_space && addr < h1.from_top)
            }
            Space::H1Old => addr < h1.old_top,
            Space::H2 => self.h2.is_allocated(addr),
        };
        if ok {
            Ok(space)
        } else {
            Err(bad)
        }
    }

    /// Raw word load from either heap. Used by the collector, the mutator and
    /// by external inspection; the caller supplies a mapped address.
    #[inline]
    pub fn load(&self, addr: u64) -> u64 {
        if self.h1.layout().contains(addr) {
            self.h1.load(addr)
        } else {
            self.h2.load(addr)
        }
    }

    #[inline]
    pub(crate) fn store(&mut self, addr: u64, value: u64) {
        if self.h1.layout().contains(addr) {
            self.h1.store(addr, value)
        } else {
            self.h2.store(addr, value)
        }
    }

    pub fn header(&self, h: ObjectHandle) -> Result<ObjectHeader> {
        self.check_object(h.addr())?;
        Ok(ObjectHeader::decode(self.load(h.addr()), self.load(h.addr() + WORD)))
    }

    pub(crate) fn descriptor_at(&self, addr: u64) -> Result<&Arc<ClassDescriptor>> {
        let id = class_of(self.load(addr));
        self.classes.get(id).ok_or_else(|| HeapError::Corruption {
            addr,
            reason: format!("header names unknown {id}"),
        })
    }

    pub fn class_of(&self, h: ObjectHandle) -> Result<&Arc<ClassDescriptor>> {
        self.check_object(h.addr())?;
        self.descriptor_at(h.addr())
    }

    /// Allocates a zeroed instance of `class` in eden, collecting when eden
    /// is full.
    pub fn allocate(&mut self, class: ClassId) -> Result<ObjectHandle> {
        let size = self.class(class)?.size();
        let eden = self.h1.layout().eden_end - self.h1.layout().young_base;
        if size > eden {
            return Err(HeapError::HeapExhausted { space: "eden", needed: size, available: eden });
        }
        let addr = match self.h1.bump_eden(size) {
            Some(a) => a,
            None => {
                self.minor_collect()?;
                match self.h1.bump_eden(size) {
                    Some(a) => a,
                    None => {
                        self.major_collect()?;
                        self.h1.bump_eden(size).ok_or(HeapError::HeapExhausted {
                            space: "eden",
                            needed: size,
                            available: self.h1.eden_free(),
                        })?
                    }
                }
            }
        };
        self.h1.store(addr, make_word0(class, 0));
        Ok(ObjectHandle::from_raw(addr).expect("eden never starts at zero"))
    }

    pub fn add_root(&mut self, h: Option<ObjectHandle>) -> RootSlot {
        self.roots.add(ObjectHandle::raw(h))
    }

    pub fn drop_root(&mut self, slot: RootSlot) -> Result<()> {
        self.roots.drop_slot(slot)
    }

    pub fn root(&self, slot: RootSlot) -> Result<Option<ObjectHandle>> {
        self.roots.get(slot).map(ObjectHandle::from_raw)
    }

    pub fn set_root(&mut self, slot: RootSlot, h: Option<ObjectHandle>) -> Result<()> {
        self.roots.set(slot, ObjectHandle::raw(h))
    }

    /// `(space, start, top)` for every H1 space holding objects, in address
    /// order of the old generation first.
    pub fn h1_extents(&self) -> Vec<(Space, u64, u64)> {
        let [old, from, eden] = self.h1.extents();
        vec![
            (Space::H1Old, old.0, old.1),
            (Space::H1Young, from.0, from.1),
            (Space::H1Young, eden.0, eden.1),
        ]
    }

    pub(crate) fn h1_range(&self) -> std::ops::Range<u64> {
        let l = self.h1.layout();
        l.young_base..l.old_end
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::h2::BackingKind;

    pub(crate) fn tiny() -> Runtime {
        let h1 = H1Config { young_size: 10 * 1024, old_size: 16 * 1024, tenuring_threshold: 2, card_segment: 512 };
        let h2 = H2Config {
            size: 1 << 20,
            region_size: 256 << 10,
            card_segment: 8 << 10,
            stripe_size: 64 << 10,
            scan_threads: 2,
            backing: BackingKind::Anonymous,
        };
        Runtime::new(h1, h2).unwrap()
    }

    #[test]
    fn classify_ranges() {
        let rt = tiny();
        let l = *rt.h1().layout();
        let h = |a| ObjectHandle::from_raw(a).unwrap();
        assert_eq!(rt.classify_handle(h(l.young_base)).unwrap(), Space::H1Young);
        assert_eq!(rt.classify_handle(h(l.young_end - 8)).unwrap(), Space::H1Young);
        assert_eq!(rt.classify_handle(h(l.old_base)).unwrap(), Space::H1Old);
        assert_eq!(rt.classify_handle(h(rt.h2().base())).unwrap(), Space::H2);
        assert!(matches!(rt.classify_handle(h(l.old_end)), Err(HeapError::InvalidHandle(_))));
        assert!(rt.classify_handle(h(rt.h2().end())).is_err());
    }

    #[test]
    fn first_allocation_at_eden_base() {
        let mut rt = tiny();
        let c = rt.register_class(vec![FieldSpec::reference(16), FieldSpec::scalar(24)]).unwrap();
        let h = rt.allocate(c.class_id).unwrap();
        assert_eq!(h.addr(), rt.h1().layout().young_base);
        assert_eq!(rt.header(h).unwrap().class_id, c.class_id);
        assert_eq!(rt.header(h).unwrap().age, 0);
    }

    #[test]
    fn root_slots() {
        let mut rt = tiny();
        let s = rt.add_root(None);
        assert_eq!(rt.root(s).unwrap(), None);
        rt.drop_root(s).unwrap();
        assert!(matches!(rt.drop_root(s), Err(HeapError::InvalidSlot(_))));
        assert!(rt.root(s).is_err());
    }
}
