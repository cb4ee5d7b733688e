//! Persist hints, cache-candidate marking and the H2 image writer.
//!
//! A persisted partition root is held by a runtime cache slot and recorded as
//! a hint. At the next major collection the transitive closure of each hinted
//! root over non-transient references is marked with the partition id and
//! moved into H2 regions bound to that partition.

use std::collections::{HashSet, VecDeque};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{HeapError, Result};
use crate::h2::H2Heap;
use crate::object::{ObjectHandle, Space, TcWord, WORD};
use crate::runtime::Runtime;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PersistHint {
    pub root: u64,
    pub partition: u32,
}

/// Which objects a persist hint sends to H2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrationPolicy {
    /// The root and everything reachable from it over non-transient fields.
    #[default]
    Etr,
    /// The root object alone.
    RootOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteMode {
    /// Copy each object straight into the mapping.
    Direct,
    /// Stage into fixed-size buffers and write them from worker threads.
    #[default]
    Batched,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WriteStrategy {
    pub mode: WriteMode,
    #[serde(deserialize_with = "crate::config::de_size")]
    pub buffer_size: u64,
    pub queue_depth: usize,
    pub writers: usize,
}

impl Default for WriteStrategy {
    fn default() -> Self {
        WriteStrategy { mode: WriteMode::Batched, buffer_size: 2 << 20, queue_depth: 64, writers: 4 }
    }
}

impl WriteStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_size == 0 || !self.buffer_size.is_multiple_of(WORD) {
            return Err(HeapError::Config(format!(
                "migration.buffer_size ({}) must be a positive multiple of 8",
                self.buffer_size
            )));
        }
        if self.queue_depth == 0 || self.writers == 0 {
            return Err(HeapError::Config(
                "migration.queue_depth and migration.writers must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

struct Batch {
    data: Vec<u8>,
    /// `(image offset, start in data, len)`
    extents: Vec<(u64, usize, usize)>,
}

pub(crate) struct Workers {
    tx: Option<SyncSender<Batch>>,
    handles: Vec<JoinHandle<std::io::Result<()>>>,
    base: u64,
    cap: usize,
    cur: Batch,
    flushes: u64,
}

/// Writes object images into H2 during compaction.
pub(crate) enum ImageWriter {
    Direct { flushes: u64 },
    Batched(Workers),
}

impl ImageWriter {
    pub(crate) fn new(strategy: &WriteStrategy, h2: &mut H2Heap) -> Self {
        match strategy.mode {
            WriteMode::Direct => ImageWriter::Direct { flushes: 0 },
            WriteMode::Batched => {
                let (tx, rx) = sync_channel::<Batch>(strategy.queue_depth);
                let rx = std::sync::Arc::new(std::sync::Mutex::new(rx));
                let sink = std::sync::Arc::new(h2.sink());
                let handles = (0..strategy.writers)
                    .map(|_| {
                        let rx = rx.clone();
                        let sink = sink.clone();
                        std::thread::spawn(move || loop {
                            let batch = match rx.lock().expect("writer queue poisoned").recv() {
                                Ok(b) => b,
                                Err(_) => return Ok(()),
                            };
                            for (off, s, len) in batch.extents {
                                sink.write_at(off, &batch.data[s..s + len])?;
                            }
                        })
                    })
                    .collect();
                let cap = strategy.buffer_size as usize;
                ImageWriter::Batched(Workers {
                    tx: Some(tx),
                    handles,
                    base: h2.base(),
                    cap,
                    cur: Batch { data: Vec::with_capacity(cap), extents: Vec::new() },
                    flushes: 0,
                })
            }
        }
    }

    pub(crate) fn write(&mut self, h2: &mut H2Heap, addr: u64, bytes: &[u8]) -> Result<()> {
        match self {
            ImageWriter::Direct { flushes } => {
                h2.write_bytes(addr, bytes);
                *flushes += 1;
                Ok(())
            }
            ImageWriter::Batched(w) => {
                let mut off = addr - w.base;
                let mut rest = bytes;
                while !rest.is_empty() {
                    let room = w.cap - w.cur.data.len();
                    let n = room.min(rest.len());
                    let start = w.cur.data.len();
                    w.cur.data.extend_from_slice(&rest[..n]);
                    match w.cur.extents.last_mut() {
                        Some((o, s, l)) if *o + *l as u64 == off && *s + *l == start => *l += n,
                        _ => w.cur.extents.push((off, start, n)),
                    }
                    off += n as u64;
                    rest = &rest[n..];
                    if w.cur.data.len() == w.cap {
                        w.flush()?;
                    }
                }
                Ok(())
            }
        }
    }

    /// Drains outstanding writes and returns the number of write operations
    /// issued (objects for direct mode, buffers for batched mode).
    pub(crate) fn finish(self) -> Result<u64> {
        match self {
            ImageWriter::Direct { flushes } => Ok(flushes),
            ImageWriter::Batched(mut w) => {
                if !w.cur.data.is_empty() {
                    w.flush()?;
                }
                drop(w.tx.take());
                for h in w.handles.drain(..) {
                    h.join().expect("writer thread panicked")?;
                }
                Ok(w.flushes)
            }
        }
    }
}

impl Workers {
    fn flush(&mut self) -> Result<()> {
        let batch = std::mem::replace(
            &mut self.cur,
            Batch { data: Vec::with_capacity(self.cap), extents: Vec::new() },
        );
        self.flushes += 1;
        if self.tx.as_ref().expect("writer already finished").send(batch).is_err() {
            // A worker died; its join error carries the cause.
            self.tx = None;
            for h in self.handles.drain(..) {
                h.join().expect("writer thread panicked")?;
            }
            return Err(HeapError::Io(std::io::Error::other("H2 writer stopped")));
        }
        Ok(())
    }
}

impl Drop for Workers {
    fn drop(&mut self) {
        self.tx = None;
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Runtime {
    /// Marks `root` as the root of cached partition `partition`. The object
    /// stays reachable through a runtime cache slot until `unpersist`, and
    /// its closure moves to H2 at the next major collection.
    pub fn persist(&mut self, root: ObjectHandle, partition: u32) -> Result<()> {
        let space = self.check_object(root.addr())?;
        match self.cache.get(&partition) {
            Some(&slot) => {
                let old = self.roots.get(slot)?;
                if old != root.addr() && self.h1.layout.contains(old) {
                    self.h1.store(old + WORD, 0);
                }
                self.roots.set(slot, root.addr())?
            }
            None => {
                let slot = self.roots.add(root.addr());
                self.cache.insert(partition, slot);
            }
        }
        self.hints.retain(|h| h.partition != partition);
        if space != Space::H2 {
            self.h1.store(root.addr() + WORD, TcWord::marked(partition).encode());
            self.hints.push(PersistHint { root: root.addr(), partition });
        }
        Ok(())
    }

    /// Releases the cache slot of `partition`. Unknown ids are ignored.
    pub fn unpersist(&mut self, partition: u32) -> Result<()> {
        if let Some(slot) = self.cache.remove(&partition) {
            let v = self.roots.get(slot)?;
            if self.h1.layout.contains(v) && TcWord::decode(self.h1.load(v + WORD)).partition == partition {
                self.h1.store(v + WORD, 0);
            }
            self.roots.drop_slot(slot)?;
        }
        self.hints.retain(|h| h.partition != partition);
        Ok(())
    }

    pub fn cached_root(&self, partition: u32) -> Option<ObjectHandle> {
        let slot = self.cache.get(&partition)?;
        self.roots.get(*slot).ok().and_then(ObjectHandle::from_raw)
    }

    pub fn cached_partitions(&self) -> impl Iterator<Item = u32> + '_ {
        self.cache.keys().copied()
    }

    /// The H1 objects the current policy would move for a hint on `root`,
    /// skipping objects already claimed by another partition. Does not
    /// modify the heap.
    pub fn etr_closure(&self, root: ObjectHandle, partition: u32) -> Vec<u64> {
        let mut seen = HashSet::new();
        self.closure_into(root.addr(), partition, false, &mut seen)
    }

    fn claimed_by_other(&self, addr: u64, partition: u32) -> bool {
        let tc = TcWord::decode(self.h1.load(addr + WORD));
        tc.marked && tc.partition != partition
    }

    fn closure_into(
        &self,
        root: u64,
        partition: u32,
        live_only: bool,
        seen: &mut HashSet<u64>,
    ) -> Vec<u64> {
        let l = self.h1.layout;
        let eligible = |a: u64| {
            l.contains(a) && (!live_only || self.h1.is_marked(a)) && !self.claimed_by_other(a, partition)
        };
        let mut out = Vec::new();
        if !eligible(root) || !seen.insert(root) {
            return out;
        }
        let mut queue = VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            out.push(a);
            if self.policy == MigrationPolicy::RootOnly {
                continue;
            }
            let Ok(desc) = self.descriptor_at(a) else { continue };
            for (off, transient) in desc.reference_offsets() {
                if transient {
                    continue;
                }
                let v = self.h1.load(a + off as u64);
                if v != 0 && eligible(v) && seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        out
    }

    /// Applies the migration policy to `hints`, writing the partition into
    /// the tc word of every selected object. Earlier hints win over later
    /// ones for shared objects. Returns the number of objects marked.
    pub(crate) fn etr_mark(&mut self, hints: &[PersistHint], live_only: bool) -> Result<u64> {
        let mut seen = HashSet::new();
        let mut total = 0;
        for h in hints {
            let objs = self.closure_into(h.root, h.partition, live_only, &mut seen);
            let word = TcWord::marked(h.partition).encode();
            for a in &objs {
                self.h1.store(a + WORD, word);
            }
            total += objs.len() as u64;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::h1::H1Config;
    use crate::h2::{BackingKind, H2Config};
    use crate::object::FieldSpec;

    fn rt(mode: WriteMode, buffer: u64) -> Runtime {
        let h1 = H1Config { young_size: 20 * 1024, old_size: 64 * 1024, tenuring_threshold: 2, card_segment: 512 };
        let h2 = H2Config {
            size: 1 << 20,
            region_size: 256 << 10,
            card_segment: 8 << 10,
            stripe_size: 64 << 10,
            scan_threads: 2,
            backing: BackingKind::TempFile,
        };
        Runtime::new(h1, h2)
            .unwrap()
            .with_strategy(WriteStrategy { mode, buffer_size: buffer, queue_depth: 2, writers: 2 })
    }

    fn chain(rt: &mut Runtime, n: usize) -> (ObjectHandle, crate::object::ClassId) {
        let c = rt
            .register_class(vec![FieldSpec::reference(16), FieldSpec::transient_reference(24), FieldSpec::scalar(32)])
            .unwrap();
        let head = rt.allocate(c.class_id).unwrap();
        let slot = rt.add_root(Some(head));
        let mut prev = head;
        for i in 1..n {
            let o = rt.allocate(c.class_id).unwrap();
            rt.write_scalar(o, 2, i as u64).unwrap();
            rt.write_ref(prev, 0, Some(o)).unwrap();
            prev = o;
        }
        let head = rt.root(slot).unwrap().unwrap();
        rt.drop_root(slot).unwrap();
        (head, c.class_id)
    }

    #[test]
    fn closure_follows_non_transient_only() {
        let mut rt = rt(WriteMode::Direct, 4096);
        let (head, class) = chain(&mut rt, 5);
        let side = rt.allocate(class).unwrap();
        rt.write_ref(head, 1, Some(side)).unwrap();
        let cl = rt.etr_closure(head, 3);
        assert_eq!(cl.len(), 5);
        assert!(!cl.contains(&side.addr()));
    }

    #[test]
    fn persisted_chain_moves_to_h2() {
        for (mode, buf) in [(WriteMode::Direct, 4096), (WriteMode::Batched, 64), (WriteMode::Batched, 1 << 20)] {
            let mut rt = rt(mode, buf);
            let (head, _) = chain(&mut rt, 10);
            rt.persist(head, 4).unwrap();
            let stats = rt.major_collect().unwrap();
            assert_eq!(stats.etr_marked, 10);
            assert_eq!(stats.objects_moved_to_h2, 10);
            let mut cur = rt.cached_root(4);
            let mut i = 0;
            while let Some(o) = cur {
                assert_eq!(rt.classify_handle(o).unwrap(), Space::H2);
                assert_eq!(rt.read_scalar(o, 2).unwrap(), i);
                cur = rt.read_ref(o, 0).unwrap();
                i += 1;
            }
            assert_eq!(i, 10);
            let expect = match mode {
                WriteMode::Direct => 10,
                WriteMode::Batched => stats.bytes_moved_to_h2.div_ceil(buf),
            };
            assert_eq!(stats.flush_ops, expect);
        }
    }

    #[test]
    fn unpersist_frees_region() {
        let mut rt = rt(WriteMode::Batched, 4096);
        let (head, _) = chain(&mut rt, 3);
        rt.persist(head, 1).unwrap();
        rt.major_collect().unwrap();
        assert_eq!(rt.h2().free_region_count(), 3);
        rt.unpersist(1).unwrap();
        rt.unpersist(99).unwrap();
        let stats = rt.major_collect().unwrap();
        assert_eq!(stats.regions_freed, vec![0]);
        assert_eq!(rt.h2().free_region_count(), 4);
    }

    #[test]
    fn first_hint_wins_shared_objects() {
        let mut rt = rt(WriteMode::Direct, 4096);
        let (a, class) = chain(&mut rt, 3);
        let b = rt.allocate(class).unwrap();
        let a_next = rt.read_ref(a, 0).unwrap();
        rt.write_ref(b, 0, a_next).unwrap();
        rt.persist(a, 1).unwrap();
        rt.persist(b, 2).unwrap();
        let stats = rt.major_collect().unwrap();
        assert_eq!(stats.etr_marked, 4);
        let a = rt.cached_root(1).unwrap();
        let b = rt.cached_root(2).unwrap();
        assert_ne!(rt.h2().region_of(a.addr()), rt.h2().region_of(b.addr()));
        assert_eq!(rt.read_ref(b, 0).unwrap(), rt.read_ref(a, 0).unwrap());
        let ra = rt.h2().region_of(a.addr());
        let rb = rt.h2().region_of(b.addr());
        assert_eq!(rt.h2().group_of(ra), rt.h2().group_of(rb));
    }

    #[test]
    fn transient_field_becomes_backward_reference() {
        let mut rt = rt(WriteMode::Batched, 4096);
        let (head, class) = chain(&mut rt, 2);
        let scratch = rt.allocate(class).unwrap();
        rt.write_scalar(scratch, 2, 77).unwrap();
        rt.write_ref(head, 1, Some(scratch)).unwrap();
        rt.persist(head, 1).unwrap();
        let stats = rt.major_collect().unwrap();
        assert_eq!(stats.objects_moved_to_h2, 2);
        let head = rt.cached_root(1).unwrap();
        let s = rt.read_ref(head, 1).unwrap().unwrap();
        assert_eq!(rt.classify_handle(s).unwrap(), Space::H1Old);
        rt.minor_collect().unwrap();
        assert_eq!(rt.backward_refs().len(), 1);
        rt.major_collect().unwrap();
        let s = rt.read_ref(head, 1).unwrap().unwrap();
        assert_eq!(rt.read_scalar(s, 2).unwrap(), 77);
    }
}
