//! Trace replay in one of three caching modes.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::serializer::{deserialize, serialize};
use super::trace::{AccessKind, FieldDecl, GcKind, Trace, TraceError, TraceEvent};
use crate::config::RuntimeConfig;
use crate::error::{HeapError, Result};
use crate::h2::{BackingKind, H2Config};
use crate::metrics::{nanos, GcMetrics};
use crate::object::{ClassDescriptor, ClassId, FieldKind, FieldSpec, ObjectHandle};
use crate::runtime::{RootSlot, Runtime};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Dual heap: persisted partitions move to H2.
    #[default]
    Tc,
    /// Single heap; cached partitions beyond the cache budget are
    /// serialized off-heap.
    Sd,
    /// Single heap large enough to keep every cached partition.
    Mo,
}

impl FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tc" => Ok(RunMode::Tc),
            "sd" => Ok(RunMode::Sd),
            "mo" => Ok(RunMode::Mo),
            _ => Err(format!("unknown mode {s:?} (expected tc, sd or mo)")),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Tc => "tc",
            RunMode::Sd => "sd",
            RunMode::Mo => "mo",
        })
    }
}

/// Per-run results. Everything except the `_ns` fields is a deterministic
/// function of the config and trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub run_id: String,
    pub config_hash: String,
    pub mode: RunMode,
    pub seed: u64,
    pub events: u64,
    pub gc: GcMetrics,
    pub bytes_serialized: u64,
    pub bytes_deserialized: u64,
    pub evictions: u64,
    pub accesses: u64,
    pub mutator_steps: u64,
    /// Access results in trace order.
    pub checksums: Vec<u64>,
    pub h2_regions_in_use: u64,
    pub h2_boundary_fraction: f64,
    pub total_ns: u64,
}

fn fnv(h: u64, v: u64) -> u64 {
    let mut h = h;
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

const FNV_INIT: u64 = 0xcbf2_9ce4_8422_2325;

impl MetricsReport {
    pub fn checksum_digest(&self) -> u64 {
        self.checksums.iter().fold(FNV_INIT, |h, &c| fnv(h, c))
    }

    /// `(column, value)` pairs in CSV order. The column set never depends on
    /// the run.
    pub fn columns(&self) -> Vec<(&'static str, String)> {
        let g = &self.gc;
        let mut c: Vec<(&'static str, String)> = vec![
            ("run_id", self.run_id.clone()),
            ("config_hash", self.config_hash.clone()),
            ("mode", self.mode.to_string()),
            ("seed", self.seed.to_string()),
        ];
        let counters: [(&'static str, u64); 37] = [
            ("events", self.events),
            ("accesses", self.accesses),
            ("mutator_steps", self.mutator_steps),
            ("minor_collections", g.minor_collections),
            ("major_collections", g.major_collections),
            ("objects_marked", g.objects_marked),
            ("objects_copied", g.objects_copied),
            ("objects_promoted", g.objects_promoted),
            ("bytes_copied", g.bytes_copied),
            ("h1_cards_scanned", g.h1_cards_scanned),
            ("h2_cards_scanned", g.h2_cards_scanned),
            ("h2_cards_cleaned", g.h2_cards_cleaned),
            ("h2_boundary_dirty", g.h2_boundary_dirty),
            ("h2_boundary_retained", g.h2_boundary_retained),
            ("h2_bytes_walked", g.h2_bytes_walked),
            ("backward_refs_found", g.backward_refs_found),
            ("etr_marked", g.etr_marked),
            ("objects_moved_to_h2", g.objects_moved_to_h2),
            ("bytes_moved_to_h2", g.bytes_moved_to_h2),
            ("h2_flush_ops", g.h2_flush_ops),
            ("group_merges", g.group_merges),
            ("regions_freed", g.regions_freed),
            ("reclaim_ops", g.reclaim_ops),
            ("h2_regions_in_use", self.h2_regions_in_use),
            ("old_bytes_before_major", g.old_bytes_before_major),
            ("old_bytes_reclaimed", g.old_bytes_reclaimed),
            ("h1_barrier_hits", g.h1_barrier_hits),
            ("h2_barrier_hits", g.h2_barrier_hits),
            ("barrier_ops", g.barrier_ops),
            ("bytes_serialized", self.bytes_serialized),
            ("bytes_deserialized", self.bytes_deserialized),
            ("evictions", self.evictions),
            ("checksum_digest", self.checksum_digest()),
            ("minor_ns", g.minor_ns),
            ("major_ns", g.major_ns),
            ("mark_ns", g.mark_ns),
            ("precompact_ns", g.precompact_ns),
        ];
        c.extend(counters.iter().map(|(k, v)| (*k, v.to_string())));
        c.push(("mean_reclaimed_fraction", format!("{:.6}", g.mean_reclaimed_fraction())));
        c.push(("h2_boundary_fraction", format!("{:.6}", self.h2_boundary_fraction)));
        c.push(("compact_ns", g.compact_ns.to_string()));
        c.push(("adjust_ns", g.adjust_ns.to_string()));
        c.push(("total_ns", self.total_ns.to_string()));
        c
    }

    pub fn header() -> Vec<&'static str> {
        MetricsReport::default().columns().into_iter().map(|(k, _)| k).collect()
    }

    /// Columns that are deterministic integer work counters (suitable for
    /// normalization across a sweep).
    pub fn is_work_counter(column: &str) -> bool {
        !column.ends_with("_ns")
            && !matches!(column, "run_id" | "config_hash" | "mode" | "seed" | "checksum_digest")
    }
}

struct ClassPair {
    plain: Arc<ClassDescriptor>,
    /// Same layout with every reference field transient.
    cut: Arc<ClassDescriptor>,
}

enum Stored {
    Heap(RootSlot),
    Serialized(Vec<u8>),
}

struct Partition {
    data: Stored,
    persisted: bool,
    bytes: u64,
}

/// Replays trace events against one runtime.
pub struct Driver {
    rt: Runtime,
    mode: RunMode,
    classes: HashMap<String, ClassPair>,
    scratch: ClassId,
    parts: BTreeMap<u32, Partition>,
    lru: VecDeque<u32>,
    cached_bytes: u64,
    cache_limit: u64,
    /// Run seed; mixed into every event seed.
    salt: u64,
    report: MetricsReport,
}

fn event_err(index: usize) -> impl Fn(HeapError) -> TraceError {
    move |e| TraceError::Event { index, message: e.to_string() }
}

fn violation(index: usize, message: impl Into<String>) -> TraceError {
    TraceError::Event { index, message: message.into() }
}

impl Driver {
    pub fn new(cfg: &RuntimeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut h1 = cfg.h1.clone();
        let mut h2 = cfg.h2.clone();
        match cfg.mode {
            RunMode::Tc => {}
            RunMode::Sd | RunMode::Mo => {
                // H2 is unused; keep one anonymous region.
                h2 = H2Config { size: h2.region_size, backing: BackingKind::Anonymous, ..h2 };
                if cfg.mode == RunMode::Mo {
                    h1.old_size *= cfg.cache.mo_old_factor;
                }
            }
        }
        let cache_limit = (cfg.h1.total() as f64 * cfg.cache.sd_fraction) as u64;
        let mut rt = Runtime::new(h1, h2)?
            .with_strategy(cfg.migration.strategy())
            .with_policy(cfg.migration.policy)
            .with_scalar_barrier(cfg.migration.scalar_barrier);
        let scratch = rt.register_class(vec![FieldSpec::scalar(16)])?.class_id;
        let cards = rt.h2().cards();
        let report = MetricsReport {
            run_id: cfg.run_id.clone().unwrap_or_else(|| format!("{}-{}", cfg.mode, cfg.hash())),
            config_hash: cfg.hash(),
            mode: cfg.mode,
            seed: cfg.seed,
            h2_boundary_fraction: cards.boundary_count() as f64 / cards.len() as f64,
            ..MetricsReport::default()
        };
        Ok(Driver {
            rt,
            mode: cfg.mode,
            classes: HashMap::new(),
            scratch,
            parts: BTreeMap::new(),
            lru: VecDeque::new(),
            cached_bytes: 0,
            cache_limit,
            salt: cfg.seed,
            report,
        })
    }

    pub fn runtime(&self) -> &Runtime {
        &self.rt
    }

    pub fn runtime_mut(&mut self) -> &mut Runtime {
        &mut self.rt
    }

    pub fn report(&self) -> &MetricsReport {
        &self.report
    }

    /// Root of a partition that currently lives on either heap.
    pub fn partition_root(&self, pid: u32) -> Option<ObjectHandle> {
        match &self.parts.get(&pid)?.data {
            Stored::Heap(slot) => self.rt.root(*slot).ok().flatten(),
            Stored::Serialized(_) => None,
        }
    }

    pub fn partition_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.parts.keys().copied()
    }

    pub fn finish(mut self) -> MetricsReport {
        self.report.gc = self.rt.metrics().clone();
        self.report.h2_regions_in_use =
            (self.rt.h2().regions().len() - self.rt.h2().free_region_count()) as u64;
        self.report
    }

    pub fn apply(&mut self, index: usize, ev: &TraceEvent) -> std::result::Result<(), TraceError> {
        let err = event_err(index);
        self.report.events += 1;
        match ev {
            TraceEvent::DefineClass { name, fields } => {
                if self.classes.contains_key(name) {
                    return Err(violation(index, format!("class {name:?} defined twice")));
                }
                let plain: Vec<(FieldKind, bool)> = fields
                    .iter()
                    .map(|f| match f {
                        FieldDecl::Ref => (FieldKind::Reference, false),
                        FieldDecl::TransientRef => (FieldKind::Reference, true),
                        FieldDecl::Scalar => (FieldKind::Scalar, false),
                    })
                    .collect();
                let cut: Vec<(FieldKind, bool)> =
                    plain.iter().map(|&(k, _)| (k, k == FieldKind::Reference)).collect();
                let plain = self.rt.register_class(FieldSpec::packed(&plain)).map_err(&err)?;
                let cut = self.rt.register_class(FieldSpec::packed(&cut)).map_err(&err)?;
                self.classes.insert(name.clone(), ClassPair { plain, cut });
            }
            TraceEvent::BuildPartition { pid, class, count, fanout, transient, seed } => {
                if self.parts.contains_key(pid) {
                    return Err(violation(index, format!("partition {pid} already exists")));
                }
                let pair = self
                    .classes
                    .get(class)
                    .ok_or_else(|| violation(index, format!("unknown class {class:?}")))?;
                if *fanout as usize > pair.plain.reference_fields().len() {
                    return Err(violation(
                        index,
                        format!("fanout {fanout} exceeds the reference fields of {class:?}"),
                    ));
                }
                if *count == 0 {
                    return Err(violation(index, "count must be at least 1"));
                }
                let (plain, cut) = (pair.plain.clone(), pair.cut.clone());
                let slot = self.build(&plain, &cut, *count, *fanout, *transient, *seed).map_err(&err)?;
                self.report.mutator_steps += *count as u64;
                self.parts.insert(*pid, Partition { data: Stored::Heap(slot), persisted: false, bytes: 0 });
            }
            TraceEvent::Persist { pid } => self.persist(index, *pid)?,
            TraceEvent::Access { pid, kind, seed } => {
                let sum = self.access(index, *pid, *kind, *seed)?;
                self.report.accesses += 1;
                self.report.checksums.push(sum);
            }
            TraceEvent::Mutate { pid, count, seed } => self.mutate(index, *pid, *count, *seed)?,
            TraceEvent::Unpersist { pid } => {
                if let Some(p) = self.parts.remove(pid) {
                    if let Stored::Heap(slot) = p.data {
                        self.rt.drop_root(slot).map_err(&err)?;
                        if self.mode == RunMode::Sd && p.persisted {
                            self.cached_bytes -= p.bytes;
                        }
                    }
                    self.lru.retain(|q| q != pid);
                }
                if self.mode == RunMode::Tc {
                    self.rt.unpersist(*pid).map_err(&err)?;
                }
            }
            TraceEvent::Gc(GcKind::Minor) => {
                self.rt.minor_collect().map_err(&err)?;
            }
            TraceEvent::Gc(GcKind::Major) => {
                self.rt.major_collect().map_err(&err)?;
            }
        }
        Ok(())
    }

    fn rng(&self, seed: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(self.salt);
        r
    }

    fn build(
        &mut self,
        plain: &ClassDescriptor,
        cut: &ClassDescriptor,
        count: u32,
        fanout: u32,
        transient: f64,
        seed: u64,
    ) -> Result<RootSlot> {
        let mut rng = self.rng(seed);
        let mut slots = Vec::with_capacity(count as usize);
        let mut out = Ok(());
        for _ in 0..count {
            let class = if transient > 0.0 && rng.gen_bool(transient) { cut } else { plain };
            match self.rt.allocate(class.class_id) {
                Ok(h) => {
                    for (i, f) in class.fields.iter().enumerate() {
                        if f.kind == FieldKind::Scalar {
                            self.rt.write_scalar(h, i, rng.gen::<u32>() as u64)?;
                        }
                    }
                    slots.push(self.rt.add_root(Some(h)));
                }
                Err(e) => {
                    out = Err(e);
                    break;
                }
            }
        }
        if out.is_ok() {
            let refs = plain.reference_fields().to_vec();
            for i in 0..count as usize {
                let obj = self.rt.root(slots[i])?.expect("rooted");
                for (j, &field) in refs.iter().take(fanout as usize).enumerate() {
                    let t = if j == 0 {
                        (i + 1 < count as usize).then_some(i + 1)
                    } else {
                        Some(rng.gen_range(0..count as usize))
                    };
                    if let Some(t) = t {
                        let target = self.rt.root(slots[t])?;
                        self.rt.write_ref(obj, field, target)?;
                    }
                }
            }
        }
        let mut keep = None;
        for (i, s) in slots.into_iter().enumerate() {
            if i == 0 && out.is_ok() {
                keep = Some(s);
            } else {
                self.rt.drop_root(s)?;
            }
        }
        out.map(|_| keep.expect("count >= 1"))
    }

    fn part(&self, index: usize, pid: u32) -> std::result::Result<&Partition, TraceError> {
        self.parts.get(&pid).ok_or_else(|| violation(index, format!("unknown partition {pid}")))
    }

    fn touch(&mut self, pid: u32) {
        if let Some(pos) = self.lru.iter().position(|&q| q == pid) {
            self.lru.remove(pos);
            self.lru.push_back(pid);
        }
    }

    fn persist(&mut self, index: usize, pid: u32) -> std::result::Result<(), TraceError> {
        let err = event_err(index);
        let p = self.part(index, pid)?;
        let already = p.persisted;
        match self.mode {
            RunMode::Tc => {
                if let Stored::Heap(slot) = p.data {
                    let root = self.rt.root(slot).map_err(&err)?.expect("partition root");
                    self.rt.persist(root, pid).map_err(&err)?;
                }
            }
            RunMode::Mo => {}
            RunMode::Sd => {
                if !already {
                    if let Stored::Heap(slot) = p.data {
                        let root = self.rt.root(slot).map_err(&err)?.expect("partition root");
                        let bytes = footprint(&self.rt, root).map_err(&err)?;
                        self.parts.get_mut(&pid).unwrap().bytes = bytes;
                        self.cached_bytes += bytes;
                        self.lru.push_back(pid);
                        self.evict(index)?;
                    }
                }
            }
        }
        if let Some(p) = self.parts.get_mut(&pid) {
            p.persisted = true;
        }
        Ok(())
    }

    fn evict(&mut self, index: usize) -> std::result::Result<(), TraceError> {
        let err = event_err(index);
        while self.cached_bytes > self.cache_limit {
            let Some(victim) = self.lru.pop_front() else { break };
            let p = self.parts.get_mut(&victim).expect("cached partition exists");
            let Stored::Heap(slot) = p.data else { continue };
            let root = self.rt.root(slot).map_err(&err)?.expect("partition root");
            let bytes = serialize(&self.rt, root).map_err(&err)?;
            self.rt.drop_root(slot).map_err(&err)?;
            self.report.bytes_serialized += bytes.len() as u64;
            self.report.evictions += 1;
            self.cached_bytes -= p.bytes;
            p.data = Stored::Serialized(bytes);
        }
        Ok(())
    }

    /// Root slot of the partition, deserializing it into a temporary copy
    /// if it was evicted. The flag tells whether the slot is temporary.
    fn materialize(&mut self, index: usize, pid: u32) -> std::result::Result<(RootSlot, bool), TraceError> {
        let bytes = match &self.part(index, pid)?.data {
            Stored::Heap(s) => return Ok((*s, false)),
            Stored::Serialized(bytes) => bytes.clone(),
        };
        self.report.bytes_deserialized += bytes.len() as u64;
        let slot = deserialize(&mut self.rt, &bytes).map_err(event_err(index))?;
        Ok((slot, true))
    }

    fn access(&mut self, index: usize, pid: u32, kind: AccessKind, seed: u64) -> std::result::Result<u64, TraceError> {
        let err = event_err(index);
        let (slot, temp) = self.materialize(index, pid)?;
        let root = self.rt.root(slot).map_err(&err)?.expect("partition root");
        let order = closure(&self.rt, root).map_err(&err)?;
        self.report.mutator_steps += order.len() as u64;
        let sum = match kind {
            AccessKind::Scan => graph_checksum(&self.rt, &order).map_err(&err)?,
            AccessKind::Point => {
                let k = self.rng(seed).gen_range(0..order.len());
                object_checksum(&self.rt, order[k]).map_err(&err)?
            }
        };
        if temp {
            self.rt.drop_root(slot).map_err(&err)?;
        } else {
            self.touch(pid);
        }
        Ok(sum)
    }

    fn mutate(&mut self, index: usize, pid: u32, count: u32, seed: u64) -> std::result::Result<(), TraceError> {
        let err = event_err(index);
        let (slot, temp) = self.materialize(index, pid)?;
        let root = self.rt.root(slot).map_err(&err)?.expect("partition root");
        let order = closure(&self.rt, root).map_err(&err)?;
        let mut rng = self.rng(seed);
        let picks: Vec<RootSlot> = (0..count)
            .map(|_| {
                let a = order[rng.gen_range(0..order.len())];
                self.rt.add_root(ObjectHandle::from_raw(a))
            })
            .collect();
        let mut result = Ok(());
        for (n, s) in picks.iter().enumerate() {
            result = self.mutate_one(*s, n as u64);
            if result.is_err() {
                break;
            }
        }
        for s in picks {
            self.rt.drop_root(s).map_err(&err)?;
        }
        result.map_err(&err)?;
        self.report.mutator_steps += count as u64;
        if temp {
            let root = self.rt.root(slot).map_err(&err)?.expect("partition root");
            let bytes = serialize(&self.rt, root).map_err(&err)?;
            self.rt.drop_root(slot).map_err(&err)?;
            self.report.bytes_serialized += bytes.len() as u64;
            self.parts.get_mut(&pid).unwrap().data = Stored::Serialized(bytes);
        } else {
            self.touch(pid);
        }
        Ok(())
    }

    /// Bumps the first scalar of the object and, if it has a transient
    /// reference field, points that field at a fresh H1 object.
    fn mutate_one(&mut self, slot: RootSlot, tag: u64) -> Result<()> {
        let obj = self.rt.root(slot)?.expect("picked object rooted");
        let desc = self.rt.class_of(obj)?.clone();
        if let Some(i) = desc.fields.iter().position(|f| f.kind == FieldKind::Scalar) {
            let v = self.rt.read_scalar(obj, i)?;
            self.rt.write_scalar(obj, i, v.wrapping_add(1))?;
        }
        if let Some(i) = desc.fields.iter().position(|f| f.kind == FieldKind::Reference && f.transient) {
            let s = self.rt.allocate(self.scratch)?;
            self.rt.write_scalar(s, 0, tag)?;
            let obj = self.rt.root(slot)?.expect("picked object rooted");
            self.rt.write_ref(obj, i, Some(s))?;
        }
        Ok(())
    }
}

/// Non-transient closure of `root` in breadth-first order, following fields
/// in declaration order.
pub fn closure(rt: &Runtime, root: ObjectHandle) -> Result<Vec<u64>> {
    let mut order = vec![root.addr()];
    let mut seen = HashSet::from([root.addr()]);
    let mut i = 0;
    while i < order.len() {
        let a = order[i];
        i += 1;
        let desc = rt.class_of(ObjectHandle::from_addr(a))?;
        for (off, transient) in desc.reference_offsets() {
            let v = rt.load(a + off as u64);
            if !transient && v != 0 && seen.insert(v) {
                order.push(v);
            }
        }
    }
    Ok(order)
}

/// Bytes of every object reachable from `root`, over all reference fields.
/// This is what keeping the partition cached on-heap retains.
fn footprint(rt: &Runtime, root: ObjectHandle) -> Result<u64> {
    let mut stack = vec![root.addr()];
    let mut seen = HashSet::from([root.addr()]);
    let mut bytes = 0;
    while let Some(a) = stack.pop() {
        let desc = rt.class_of(ObjectHandle::from_addr(a))?;
        bytes += desc.size();
        for (off, _) in desc.reference_offsets() {
            let v = rt.load(a + off as u64);
            if v != 0 && seen.insert(v) {
                stack.push(v);
            }
        }
    }
    Ok(bytes)
}

fn object_checksum(rt: &Runtime, a: u64) -> Result<u64> {
    let desc = rt.class_of(ObjectHandle::from_addr(a))?;
    let mut h = fnv(FNV_INIT, desc.fields.len() as u64);
    for f in &desc.fields {
        if f.kind == FieldKind::Scalar {
            h = fnv(h, rt.load(a + f.offset as u64));
        }
    }
    Ok(h)
}

/// Hash of scalars and non-transient edge structure, independent of where
/// the objects live.
fn graph_checksum(rt: &Runtime, order: &[u64]) -> Result<u64> {
    let pos: HashMap<u64, u64> = order.iter().enumerate().map(|(i, &a)| (a, i as u64 + 1)).collect();
    let mut h = FNV_INIT;
    for &a in order {
        let desc = rt.class_of(ObjectHandle::from_addr(a))?;
        for f in &desc.fields {
            let v = rt.load(a + f.offset as u64);
            h = match f.kind {
                FieldKind::Scalar => fnv(h, v),
                FieldKind::Reference if f.transient => h,
                FieldKind::Reference => fnv(h, if v == 0 { 0 } else { pos[&v] }),
            };
        }
    }
    Ok(h)
}

/// Replays `trace` under `cfg` and returns the run's metrics.
pub fn run_trace(trace: &Trace, cfg: &RuntimeConfig) -> std::result::Result<MetricsReport, TraceError> {
    let start = Instant::now();
    let mut d = Driver::new(cfg).map_err(TraceError::Setup)?;
    for (i, ev) in trace.events.iter().enumerate() {
        d.apply(i, ev)?;
    }
    let mut report = d.finish();
    report.total_ns = nanos(start.elapsed());
    Ok(report)
}
