//! Synthetic trace generator.
//!
//! Iterative profiles build and persist a set of long-lived input partitions,
//! then per iteration re-read every input, derive a new persisted
//! partition from it, and drop derived partitions of older iterations in
//! one batch. A `gc major` ends every iteration.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trace::{AccessKind, FieldDecl, GcKind, Trace, TraceEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    PagerankLike,
    CcLike,
    Uniform,
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pagerank_like" => Ok(Profile::PagerankLike),
            "cc_like" => Ok(Profile::CcLike),
            "uniform" => Ok(Profile::Uniform),
            _ => Err(format!("unknown profile {s:?} (expected pagerank_like, cc_like or uniform)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::PagerankLike => "pagerank_like",
            Profile::CcLike => "cc_like",
            Profile::Uniform => "uniform",
        })
    }
}

/// Objects per input partition.
pub const INPUT_OBJECTS: u32 = 512;
/// Objects per derived partition.
pub const DERIVED_OBJECTS: u32 = 128;
pub const ITERATIONS: u32 = 3;
pub const UNIFORM_ROUNDS: u32 = 4;

struct Gen {
    rng: ChaCha8Rng,
    events: Vec<TraceEvent>,
}

impl Gen {
    fn seed(&mut self) -> u64 {
        self.rng.gen()
    }

    fn push(&mut self, ev: TraceEvent) {
        self.events.push(ev);
    }

    fn class(&mut self, name: &str, fields: &[FieldDecl]) {
        self.push(TraceEvent::DefineClass { name: name.into(), fields: fields.to_vec() });
    }

    fn build(&mut self, pid: u32, class: &str, count: u32, fanout: u32, transient: f64) {
        let seed = self.seed();
        self.push(TraceEvent::BuildPartition { pid, class: class.into(), count, fanout, transient, seed });
    }

    fn access(&mut self, pid: u32, kind: AccessKind) {
        let seed = self.seed();
        self.push(TraceEvent::Access { pid, kind, seed });
    }

    fn mutate(&mut self, pid: u32, count: u32) {
        let seed = self.seed();
        self.push(TraceEvent::Mutate { pid, count, seed });
    }
}

/// Generates a trace with `scale` input partitions.
pub fn generate_trace(profile: Profile, scale: u32, seed: u64) -> Trace {
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), events: Vec::new() };
    use FieldDecl::*;
    let n = scale.max(1);
    match profile {
        Profile::PagerankLike => {
            g.class("link", &[Ref, Ref, Scalar, TransientRef, Scalar]);
            g.class("rank", &[Ref, Scalar, Scalar]);
            iterative(&mut g, n, "link", 0.0, "rank", 1, 0.0, false);
        }
        Profile::CcLike => {
            g.class("edge", &[Ref, Ref, Ref, Scalar]);
            g.class("label", &[Ref, Ref, TransientRef, Scalar]);
            iterative(&mut g, n, "edge", 0.0, "label", 3, 0.0, true);
        }
        Profile::Uniform => {
            g.class("item", &[Ref, Ref, TransientRef, Scalar, Scalar]);
            for p in 0..n {
                let t = [0.0, 0.05, 0.25][g.rng.gen_range(0..3)];
                g.build(p, "item", INPUT_OBJECTS / 2, 3, t);
                g.push(TraceEvent::Persist { pid: p });
            }
            for _ in 0..UNIFORM_ROUNDS {
                let mut order: Vec<u32> = (0..n).collect();
                order.shuffle(&mut g.rng);
                for p in order {
                    let kind = if g.rng.gen_bool(0.5) { AccessKind::Scan } else { AccessKind::Point };
                    g.access(p, kind);
                    if g.rng.gen_bool(0.25) {
                        g.mutate(p, 8);
                    }
                }
                g.push(TraceEvent::Gc(GcKind::Major));
            }
            for p in 0..n {
                g.push(TraceEvent::Unpersist { pid: p });
            }
            g.push(TraceEvent::Gc(GcKind::Major));
        }
    }
    Trace { events: g.events }
}

#[allow(clippy::too_many_arguments)]
fn iterative(
    g: &mut Gen,
    n: u32,
    input: &str,
    input_transient: f64,
    derived: &str,
    derived_fanout: u32,
    derived_transient: f64,
    mutate: bool,
) {
    for p in 0..n {
        g.build(p, input, INPUT_OBJECTS, 2, input_transient);
        g.push(TraceEvent::Persist { pid: p });
    }
    g.push(TraceEvent::Gc(GcKind::Major));
    let derived_pid = |it: u32, p: u32| n * (it + 1) + p;
    for it in 0..ITERATIONS {
        for p in 0..n {
            g.access(p, AccessKind::Scan);
            let d = derived_pid(it, p);
            g.build(d, derived, DERIVED_OBJECTS, derived_fanout, derived_transient);
            g.push(TraceEvent::Persist { pid: d });
            if it > 0 {
                g.access(derived_pid(it - 1, p), AccessKind::Point);
            }
            if mutate {
                g.mutate(d, 16);
            }
        }
        if it > 0 {
            for p in 0..n {
                g.push(TraceEvent::Unpersist { pid: derived_pid(it - 1, p) });
            }
        }
        g.push(TraceEvent::Gc(GcKind::Major));
    }
    for p in 0..n {
        g.push(TraceEvent::Unpersist { pid: derived_pid(ITERATIONS - 1, p) });
    }
    for p in 0..n {
        g.push(TraceEvent::Unpersist { pid: p });
    }
    g.push(TraceEvent::Gc(GcKind::Major));
}
