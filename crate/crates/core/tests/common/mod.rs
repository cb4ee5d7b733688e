//! Reference models used by the integration tests. They parse heaps by
//! walking headers and recompute everything from scratch, without going
//! through the collector's own bookkeeping.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::{Arc, Mutex};

use duoheap::object::{class_of, forwarding_of};
use duoheap::workload::{AccessKind, FieldDecl, GcKind, TraceEvent};
use duoheap::{BackingKind, Collection, H1Config, H2Config, Runtime, Space, Trace};
use rand::seq::IteratorRandom;
use rand::Rng;

/// Every object found by walking the allocated parts of both heaps.
#[derive(Debug, Default)]
pub struct HeapImage {
    pub young: BTreeSet<u64>,
    pub old: BTreeSet<u64>,
    pub h2: BTreeSet<u64>,
}

impl HeapImage {
    pub fn h1(&self) -> impl Iterator<Item = u64> + '_ {
        self.young.iter().chain(&self.old).copied()
    }

    pub fn contains(&self, a: u64) -> bool {
        self.young.contains(&a) || self.old.contains(&a) || self.h2.contains(&a)
    }
}

fn size_at(rt: &Runtime, a: u64) -> Result<u64, String> {
    let id = class_of(rt.load(a));
    rt.classes().get(id).map(|d| d.size()).ok_or_else(|| format!("{a:#x}: unknown class {}", id.0))
}

pub fn parse_heap(rt: &Runtime) -> Result<HeapImage, String> {
    let mut img = HeapImage::default();
    for (space, lo, hi) in rt.h1_extents() {
        let mut a = lo;
        while a < hi {
            match space {
                Space::H1Old => img.old.insert(a),
                _ => img.young.insert(a),
            };
            a += size_at(rt, a)?;
        }
        if a != hi {
            return Err(format!("H1 walk overran its extent {lo:#x}..{hi:#x}"));
        }
    }
    for (lo, hi) in rt.h2().allocated_extents() {
        let mut a = lo;
        while a < hi {
            img.h2.insert(a);
            a += size_at(rt, a)?;
        }
        if a != hi {
            return Err(format!("H2 walk overran its extent {lo:#x}..{hi:#x}"));
        }
    }
    Ok(img)
}

/// `(slot, value, transient)` for every reference field of the object at `a`.
pub fn ref_fields(rt: &Runtime, a: u64) -> Vec<(u64, u64, bool)> {
    let d = rt.classes().get(class_of(rt.load(a))).expect("parsed object");
    d.fields
        .iter()
        .filter(|f| f.is_reference())
        .map(|f| {
            let slot = a + f.offset as u64;
            (slot, rt.load(slot), f.transient)
        })
        .collect()
}

/// Everything reachable from `seeds` over all reference fields. Addresses
/// that are not object starts in `img` are collected but not expanded.
pub fn reachable(rt: &Runtime, img: &HeapImage, seeds: impl IntoIterator<Item = u64>) -> HashSet<u64> {
    let mut seen = HashSet::new();
    let mut stack: Vec<u64> = seeds.into_iter().filter(|&a| a != 0).collect();
    while let Some(a) = stack.pop() {
        if !seen.insert(a) || !img.contains(a) {
            continue;
        }
        for (_, v, _) in ref_fields(rt, a) {
            if v != 0 && !seen.contains(&v) {
                stack.push(v);
            }
        }
    }
    seen
}

/// Every H2 slot currently holding an H1 address.
pub fn exact_backward_refs(rt: &Runtime, img: &HeapImage) -> BTreeSet<(u64, u64)> {
    let l = rt.h1().layout();
    let mut out = BTreeSet::new();
    for &a in &img.h2 {
        for (slot, v, _) in ref_fields(rt, a) {
            if v >= l.young_base && v < l.old_end {
                out.insert((slot, v));
            }
        }
    }
    out
}

/// Checks one post-collection heap against the reference model.
///
/// After a minor collection the surviving young objects must be exactly the
/// young objects reachable from the roots, the old generation and H2. After
/// a major collection every H1 object must be reachable from the roots or
/// from a surviving H2 object, and every such object must still exist.
pub fn check_collection(rt: &Runtime, major: bool) -> Vec<String> {
    let mut bad = Vec::new();
    let img = match parse_heap(rt) {
        Ok(i) => i,
        Err(e) => return vec![e],
    };
    let mut seeds: Vec<u64> = rt.roots().values().filter(|&v| v != 0).collect();
    seeds.extend(img.h2.iter().copied());
    if !major {
        seeds.extend(img.old.iter().copied());
    }
    for &s in &seeds {
        if !img.contains(s) {
            bad.push(format!("root or seed {s:#x} is not an object start"));
        }
    }
    if !bad.is_empty() {
        return bad;
    }
    let live = reachable(rt, &img, seeds.iter().copied());
    for &a in &live {
        if !img.contains(a) {
            bad.push(format!("reachable {a:#x} is not an object start"));
            continue;
        }
        if forwarding_of(rt.load(a)).is_some() {
            bad.push(format!("{a:#x} still carries a forwarding pointer"));
        }
        for (slot, v, _) in ref_fields(rt, a) {
            if v != 0 && !img.contains(v) {
                bad.push(format!("slot {slot:#x} of live {a:#x} dangles to {v:#x}"));
            }
            if v != 0 && rt.h2().contains(v) && !rt.h2().is_allocated(v) {
                bad.push(format!("slot {slot:#x} points into a freed region at {v:#x}"));
            }
        }
    }
    let l = rt.h1().layout();
    let expect: BTreeSet<u64> = live
        .iter()
        .copied()
        .filter(|&a| if major { l.contains(a) } else { l.in_young(a) })
        .collect();
    let got: BTreeSet<u64> = if major { img.h1().collect() } else { img.young.clone() };
    if expect != got {
        let missing: Vec<_> = expect.difference(&got).take(4).map(|a| format!("{a:#x}")).collect();
        let extra: Vec<_> = got.difference(&expect).take(4).map(|a| format!("{a:#x}")).collect();
        bad.push(format!(
            "{} live set differs: {} expected, {} present, missing {missing:?}, garbage {extra:?}",
            if major { "H1" } else { "young" },
            expect.len(),
            got.len()
        ));
    }

    let exact = exact_backward_refs(rt, &img);
    let stack: BTreeSet<(u64, u64)> = rt.backward_refs().iter().map(|b| (b.slot, b.target)).collect();
    for r in stack.difference(&exact) {
        bad.push(format!("recorded backward ref {:#x} -> {:#x} is stale", r.0, r.1));
    }
    for r in exact.difference(&stack) {
        // A reference written by this collection's migration is only
        // recorded at the next scan, so its card must still be dirty.
        if !major || !rt.h2().cards().is_dirty(card_of_object(rt, &img, r.0)) {
            bad.push(format!("backward ref {:#x} -> {:#x} is unrecorded", r.0, r.1));
        }
    }
    bad
}

/// The card holding the start of the object that contains `slot`.
fn card_of_object(rt: &Runtime, img: &HeapImage, slot: u64) -> usize {
    let start = *img.h2.range(..=slot).next_back().expect("slot inside an H2 object");
    rt.h2().card_of(start)
}

#[derive(Clone, Default)]
pub struct Watch {
    pub violations: Arc<Mutex<Vec<String>>>,
    pub minors: Arc<AtomicU64>,
    pub majors: Arc<AtomicU64>,
}

impl Watch {
    pub fn violations(&self) -> Vec<String> {
        self.violations.lock().unwrap().clone()
    }

    pub fn checks(&self) -> u64 {
        self.minors.load(Relaxed) + self.majors.load(Relaxed)
    }
}

/// Runs `check_collection` after every collection of `rt`.
pub fn watch(rt: &mut Runtime) -> Watch {
    let w = Watch::default();
    let sink = w.clone();
    rt.set_observer(Some(Box::new(move |rt, c| {
        let major = matches!(c, Collection::Major(_));
        let counter = if major { &sink.majors } else { &sink.minors };
        counter.fetch_add(1, Relaxed);
        let v = check_collection(rt, major);
        if !v.is_empty() {
            let kind = if major { "major" } else { "minor" };
            sink.violations.lock().unwrap().extend(v.into_iter().map(|m| format!("after {kind}: {m}")));
        }
    })));
    w
}

/// Declared shape of a test graph node: the model the runtime is compared to.
#[derive(Clone, Debug)]
pub struct ModelNode {
    /// `(target node, transient)` per reference field, in field order.
    pub edges: Vec<(Option<usize>, bool)>,
}

/// Objects reachable from `root` without following transient edges,
/// computed on the model alone.
pub fn serializer_closure(nodes: &[ModelNode], root: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([root]);
    let mut q = VecDeque::from([root]);
    while let Some(n) = q.pop_front() {
        for &(t, transient) in &nodes[n].edges {
            if let (Some(t), false) = (t, transient) {
                if seen.insert(t) {
                    q.push_back(t);
                }
            }
        }
    }
    seen
}

pub fn small_h2(size: u64, region: u64, segment: u64, stripe: u64, threads: usize) -> H2Config {
    H2Config {
        size,
        region_size: region,
        card_segment: segment,
        stripe_size: stripe,
        scan_threads: threads,
        backing: BackingKind::Anonymous,
    }
}

pub fn h1(young: u64, old: u64) -> H1Config {
    H1Config { young_size: young, old_size: old, ..H1Config::default() }
}

/// A random, well-formed trace over a handful of small partitions.
pub fn random_trace(rng: &mut impl Rng, events: usize, max_count: u32) -> Trace {
    use FieldDecl::*;
    let mut out = Vec::new();
    let mut classes = Vec::new();
    for c in 0..rng.gen_range(1..=3) {
        let n = rng.gen_range(1..=6);
        let mut fields = vec![Ref];
        for _ in 1..n {
            fields.push([Ref, TransientRef, Scalar][rng.gen_range(0..3)]);
        }
        if rng.gen_bool(0.5) {
            fields.push(Scalar);
        }
        let refs = fields.iter().filter(|f| **f != Scalar).count() as u32;
        let name = format!("c{c}");
        out.push(TraceEvent::DefineClass { name: name.clone(), fields });
        classes.push((name, refs));
    }
    let mut live: BTreeMap<u32, bool> = BTreeMap::new();
    let mut next = 0u32;
    for _ in 0..events {
        let roll = rng.gen_range(0..100);
        let pick = |rng: &mut dyn rand::RngCore, live: &BTreeMap<u32, bool>| live.keys().copied().choose(rng);
        let ev = match roll {
            0..=24 if live.len() < 6 => {
                let (class, refs) = classes[rng.gen_range(0..classes.len())].clone();
                let pid = next;
                next += 1;
                live.insert(pid, false);
                TraceEvent::BuildPartition {
                    pid,
                    class,
                    count: rng.gen_range(1..=max_count),
                    fanout: rng.gen_range(0..=refs),
                    transient: [0.0, 0.1, 0.5][rng.gen_range(0..3)],
                    seed: rng.gen(),
                }
            }
            25..=44 => match pick(rng, &live) {
                Some(pid) => {
                    live.insert(pid, true);
                    TraceEvent::Persist { pid }
                }
                None => continue,
            },
            45..=64 => match pick(rng, &live) {
                Some(pid) => TraceEvent::Access {
                    pid,
                    kind: if rng.gen_bool(0.5) { AccessKind::Scan } else { AccessKind::Point },
                    seed: rng.gen(),
                },
                None => continue,
            },
            65..=74 => match pick(rng, &live) {
                Some(pid) => TraceEvent::Mutate { pid, count: rng.gen_range(1..=8), seed: rng.gen() },
                None => continue,
            },
            75..=84 => match pick(rng, &live) {
                Some(pid) => {
                    live.remove(&pid);
                    TraceEvent::Unpersist { pid }
                }
                None => continue,
            },
            85..=91 => TraceEvent::Gc(GcKind::Minor),
            _ => TraceEvent::Gc(GcKind::Major),
        };
        out.push(ev);
    }
    // Read everything back so the modes have checksums to agree on.
    for &pid in live.keys() {
        out.push(TraceEvent::Access { pid, kind: AccessKind::Scan, seed: 0 });
    }
    out.push(TraceEvent::Gc(GcKind::Major));
    Trace { events: out }
}
