//! Line-oriented trace format.
//!
//! ```text
//! # comment
//! define_class node ref ref scalar ref! scalar
//! build_partition 3 node count=1000 fanout=2 transient=0.25 seed=9
//! persist 3
//! access 3 scan seed=1
//! access 3 point seed=2
//! mutate 3 count=10 seed=4
//! unpersist 3
//! gc minor
//! gc major
//! ```
//!
//! `ref!` declares a transient reference field. Field offsets follow the
//! header in declaration order, one word each.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("event {index}: {message}")]
    Event { index: usize, message: String },
    #[error(transparent)]
    Setup(crate::error::HeapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldDecl {
    Ref,
    TransientRef,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    Scan,
    Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcKind {
    Minor,
    Major,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TraceEvent {
    DefineClass { name: String, fields: Vec<FieldDecl> },
    BuildPartition { pid: u32, class: String, count: u32, fanout: u32, transient: f64, seed: u64 },
    Persist { pid: u32 },
    Access { pid: u32, kind: AccessKind, seed: u64 },
    Mutate { pid: u32, count: u32, seed: u64 },
    Unpersist { pid: u32 },
    Gc(GcKind),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

fn kv<T: FromStr>(tok: &str, key: &str) -> Result<T, String> {
    let v = tok
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| format!("expected {key}=<value>, got {tok:?}"))?;
    v.parse().map_err(|_| format!("bad value for {key}: {v:?}"))
}

fn num<T: FromStr>(tok: Option<&str>, what: &str) -> Result<T, String> {
    let t = tok.ok_or_else(|| format!("missing {what}"))?;
    t.parse().map_err(|_| format!("bad {what}: {t:?}"))
}

fn parse_line(line: &str) -> Result<Option<TraceEvent>, String> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let toks: Vec<&str> = line.split_whitespace().collect();
    let arity = |n: usize| {
        if toks.len() == n {
            Ok(())
        } else {
            Err(format!("{} takes {} arguments, got {}", toks[0], n - 1, toks.len() - 1))
        }
    };
    let ev = match toks[0] {
        "define_class" => {
            let name = toks.get(1).ok_or("missing class name")?.to_string();
            let fields = toks[2..]
                .iter()
                .map(|t| match *t {
                    "ref" => Ok(FieldDecl::Ref),
                    "ref!" => Ok(FieldDecl::TransientRef),
                    "scalar" => Ok(FieldDecl::Scalar),
                    other => Err(format!("unknown field kind {other:?}")),
                })
                .collect::<Result<_, _>>()?;
            TraceEvent::DefineClass { name, fields }
        }
        "build_partition" => {
            arity(7)?;
            let transient: f64 = kv(toks[5], "transient")?;
            if !(0.0..=1.0).contains(&transient) {
                return Err(format!("transient must be in [0, 1], got {transient}"));
            }
            TraceEvent::BuildPartition {
                pid: num(toks.get(1).copied(), "partition id")?,
                class: toks[2].to_string(),
                count: kv(toks[3], "count")?,
                fanout: kv(toks[4], "fanout")?,
                transient,
                seed: kv(toks[6], "seed")?,
            }
        }
        "persist" => {
            arity(2)?;
            TraceEvent::Persist { pid: num(toks.get(1).copied(), "partition id")? }
        }
        "unpersist" => {
            arity(2)?;
            TraceEvent::Unpersist { pid: num(toks.get(1).copied(), "partition id")? }
        }
        "access" => {
            arity(4)?;
            let kind = match toks[2] {
                "scan" => AccessKind::Scan,
                "point" => AccessKind::Point,
                k => return Err(format!("unknown access kind {k:?}")),
            };
            TraceEvent::Access { pid: num(toks.get(1).copied(), "partition id")?, kind, seed: kv(toks[3], "seed")? }
        }
        "mutate" => {
            arity(4)?;
            TraceEvent::Mutate {
                pid: num(toks.get(1).copied(), "partition id")?,
                count: kv(toks[2], "count")?,
                seed: kv(toks[3], "seed")?,
            }
        }
        "gc" => {
            arity(2)?;
            TraceEvent::Gc(match toks[1] {
                "minor" => GcKind::Minor,
                "major" => GcKind::Major,
                k => return Err(format!("unknown collection kind {k:?}")),
            })
        }
        op => return Err(format!("unknown event {op:?}")),
    };
    Ok(Some(ev))
}

impl Trace {
    pub fn parse(text: &str) -> Result<Trace, TraceError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            match parse_line(line) {
                Ok(Some(ev)) => events.push(ev),
                Ok(None) => {}
                Err(message) => return Err(TraceError::Parse { line: i + 1, message }),
            }
        }
        Ok(Trace { events })
    }

    pub fn load(path: &Path) -> Result<Trace, TraceError> {
        Trace::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceEvent::DefineClass { name, fields } => {
                write!(f, "define_class {name}")?;
                for fd in fields {
                    f.write_str(match fd {
                        FieldDecl::Ref => " ref",
                        FieldDecl::TransientRef => " ref!",
                        FieldDecl::Scalar => " scalar",
                    })?;
                }
                Ok(())
            }
            TraceEvent::BuildPartition { pid, class, count, fanout, transient, seed } => write!(
                f,
                "build_partition {pid} {class} count={count} fanout={fanout} transient={transient} seed={seed}"
            ),
            TraceEvent::Persist { pid } => write!(f, "persist {pid}"),
            TraceEvent::Access { pid, kind, seed } => {
                let k = match kind {
                    AccessKind::Scan => "scan",
                    AccessKind::Point => "point",
                };
                write!(f, "access {pid} {k} seed={seed}")
            }
            TraceEvent::Mutate { pid, count, seed } => write!(f, "mutate {pid} count={count} seed={seed}"),
            TraceEvent::Unpersist { pid } => write!(f, "unpersist {pid}"),
            TraceEvent::Gc(GcKind::Minor) => f.write_str("gc minor"),
            TraceEvent::Gc(GcKind::Major) => f.write_str("gc major"),
        }
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for ev in &self.events {
            writeln!(f, "{ev}")?;
        }
        Ok(())
    }
}
