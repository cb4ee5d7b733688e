//! A managed runtime with two heaps: a generational, collected heap (H1) for
//! ordinary objects and a memory-mapped, region-based heap (H2) for
//! long-lived cached data that the collector does not trace.

pub mod collect;
pub mod config;
pub mod error;
pub mod h1;
pub mod h2;
pub mod metrics;
pub mod migration;
pub mod mutator;
pub mod object;
pub mod runtime;
mod starts;
pub mod workload;

pub use config::RuntimeConfig;
pub use error::{HeapError, Result};
pub use h1::{H1Config, H1Heap, H1Layout};
pub use h2::{BackingKind, BackwardRef, H2Config, H2Heap, ReclaimOutput, ScanOutput};
pub use metrics::{GcMetrics, MajorStats, MinorStats};
pub use migration::{MigrationPolicy, PersistHint, WriteMode, WriteStrategy};
pub use object::{
    ClassDescriptor, ClassId, ClassRegistry, FieldKind, FieldSpec, ObjectHandle, ObjectHeader,
    Space, TcWord, HEADER_SIZE, WORD,
};
pub use runtime::{Collection, Observer, RootSet, RootSlot, Runtime};
pub use workload::{run_trace, MetricsReport, RunMode, Trace, TraceEvent};
