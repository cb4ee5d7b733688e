//! Spark-like cache workload: partition graphs, traces and their replay.

mod driver;
mod gen;
pub mod serializer;
mod trace;

pub use driver::{closure, run_trace, Driver, MetricsReport, RunMode};
pub use gen::{generate_trace, Profile, DERIVED_OBJECTS, INPUT_OBJECTS, ITERATIONS};
pub use trace::{AccessKind, FieldDecl, GcKind, Trace, TraceError, TraceEvent};
