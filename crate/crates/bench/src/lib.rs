//! Microbenchmarks for kvflow and the pieces behind the `kvflow` tool.
//!
//! - [`put`]: open-loop put latency and throughput against a cluster
//! - [`pipeline`]: the k-stage no-op pipeline
//! - [`fastpath`]: enqueue/dequeue breakdown and trie cost per level
//! - [`report`]: sample and summary rows with their frozen CSV layouts
//!
//! Absolute numbers depend on the machine. What the benches are meant to
//! show are orderings and curve shapes.

pub mod fastpath;
pub mod pipeline;
pub mod put;
pub mod report;
pub mod stats;

pub use report::{BenchReport, Sample, SummaryRow};
