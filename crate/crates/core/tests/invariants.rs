mod common;

use std::collections::BTreeSet;

use common::{h1, small_h2};
use duoheap::config::parse_size;
use duoheap::workload::serializer::{deserialize, serialize};
use duoheap::workload::{AccessKind, FieldDecl, GcKind};
use duoheap::{FieldKind, FieldSpec, H2Heap, Runtime, Trace, TraceEvent};
use proptest::prelude::*;

fn event() -> impl Strategy<Value = TraceEvent> {
    let field = prop_oneof![Just(FieldDecl::Ref), Just(FieldDecl::TransientRef), Just(FieldDecl::Scalar)];
    prop_oneof![
        ("[a-z][a-z0-9_]{0,8}", prop::collection::vec(field, 0..6))
            .prop_map(|(name, fields)| TraceEvent::DefineClass { name, fields }),
        (any::<u32>(), "[a-z]{1,5}", 1..5000u32, 0..4u32, 0..=100u32, any::<u64>()).prop_map(
            |(pid, class, count, fanout, t, seed)| TraceEvent::BuildPartition {
                pid,
                class,
                count,
                fanout,
                transient: t as f64 / 100.0,
                seed
            }
        ),
        any::<u32>().prop_map(|pid| TraceEvent::Persist { pid }),
        any::<u32>().prop_map(|pid| TraceEvent::Unpersist { pid }),
        (any::<u32>(), any::<bool>(), any::<u64>()).prop_map(|(pid, scan, seed)| TraceEvent::Access {
            pid,
            kind: if scan { AccessKind::Scan } else { AccessKind::Point },
            seed
        }),
        (any::<u32>(), any::<u32>(), any::<u64>())
            .prop_map(|(pid, count, seed)| TraceEvent::Mutate { pid, count, seed }),
        any::<bool>().prop_map(|m| TraceEvent::Gc(if m { GcKind::Major } else { GcKind::Minor })),
    ]
}

proptest! {
    #[test]
    fn trace_text_round_trips(events in prop::collection::vec(event(), 0..40)) {
        let t = Trace { events };
        prop_assert_eq!(Trace::parse(&t.to_string()).unwrap(), t);
    }

    #[test]
    fn sizes_scale_by_1024(n in 0u64..1 << 20, unit in 0usize..4) {
        let (suffix, mult) = [("", 1u64), ("KiB", 1 << 10), ("M", 1 << 20), ("GB", 1 << 30)][unit];
        prop_assert_eq!(parse_size(&format!("{n}{suffix}")), Some(n * mult));
    }

    #[test]
    fn card_owners_cover_each_card_once(stripes in 1usize..40, per_stripe in 1usize..8, threads in 1usize..9) {
        let seg = 512u64;
        let stripe = seg * per_stripe as u64;
        let h = H2Heap::new(small_h2(stripe * stripes as u64, stripe, seg, stripe, threads), 1 << 32).unwrap();
        let mut hits = vec![0; h.cards().len()];
        for t in 0..threads {
            for c in h.cards().stripe_cards(t) {
                hits[c] += 1;
                prop_assert_eq!(h.cards().owner(c), t);
            }
        }
        prop_assert!(hits.iter().all(|&n| n == 1));
    }

    /// Groups free together: after arbitrary merges and USED marks, a region
    /// is freed exactly when no member of its group is USED.
    #[test]
    fn reclaim_respects_groups(
        merges in prop::collection::vec((0usize..12, 0usize..12), 0..16),
        used in prop::collection::btree_set(0usize..12, 0..4),
    ) {
        let mut h = H2Heap::new(small_h2(12 << 16, 1 << 16, 1 << 10, 1 << 13, 2), 1 << 32).unwrap();
        for p in 0..12 {
            h.allocate_in_region(p, 64).unwrap();
        }
        // Reference model: plain connected components.
        let mut comp: Vec<usize> = (0..12).collect();
        for &(a, b) in &merges {
            h.merge_groups(a, b);
            let (ca, cb) = (comp[a], comp[b]);
            for c in comp.iter_mut() {
                if *c == cb {
                    *c = ca;
                }
            }
        }
        for &u in &used {
            h.set_used(u);
        }
        let live: BTreeSet<usize> = used.iter().map(|&u| comp[u]).collect();
        let expect: Vec<usize> = (0..12).filter(|r| !live.contains(&comp[*r])).collect();
        let out = h.reclaim_free_regions();
        prop_assert_eq!(out.freed, expect);
    }

    /// serialize . deserialize is the identity on the serialized form.
    #[test]
    fn serializer_round_trip(
        n in 1usize..60,
        edges in prop::collection::vec((any::<prop::sample::Index>(), any::<bool>()), 0..180),
        scalars in prop::collection::vec(any::<u64>(), 60),
    ) {
        let mut rt = Runtime::new(h1(64 << 10, 256 << 10), small_h2(1 << 20, 1 << 20, 8 << 10, 64 << 10, 1)).unwrap();
        let class = rt
            .register_class(FieldSpec::packed(&[
                (FieldKind::Reference, false),
                (FieldKind::Reference, false),
                (FieldKind::Reference, true),
                (FieldKind::Scalar, false),
            ]))
            .unwrap()
            .class_id;
        let slots: Vec<_> = (0..n)
            .map(|i| {
                let h = rt.allocate(class).unwrap();
                rt.write_scalar(h, 3, scalars[i]).unwrap();
                rt.add_root(Some(h))
            })
            .collect();
        for (k, (idx, second)) in edges.iter().enumerate() {
            let from = rt.root(slots[k % n]).unwrap().unwrap();
            let to = rt.root(slots[idx.index(n)]).unwrap();
            let field = [0, if *second { 1 } else { 2 }][k % 2];
            rt.write_ref(from, field, to).unwrap();
        }
        let root = rt.root(slots[0]).unwrap().unwrap();
        let bytes = serialize(&rt, root).unwrap();
        let copy = deserialize(&mut rt, &bytes).unwrap();
        let again = serialize(&rt, rt.root(copy).unwrap().unwrap()).unwrap();
        prop_assert_eq!(bytes, again);
    }
}
