//! Sample rows and per-configuration summaries, with their CSV forms.
//!
//! Raw samples, one row per sample (times in ns):
//!
//! ```text
//! bench,op,object_size,offered_rate,op_id,stage,send_offset_ns,latency_ns,
//! submitting_ns,queue_ns,multicast_ns,processing_ns,persistence_ns,reply_ns,
//! enqueue_ns,dequeue_ns
//! ```
//!
//! `stage` is 0 for an end-to-end row and `i` for the time spent reaching
//! pipeline stage `i` from the stage before it. `send_offset_ns` is when the
//! op was actually sent, relative to the start of the run, while latency
//! counts from the scheduled time. For puts, `submitting_ns` covers the
//! scheduled time up to the request reaching the server, so the six put
//! components add up to `latency_ns`. Components that do not apply to a
//! bench are 0.
//!
//! Summaries, one row per configuration:
//!
//! ```text
//! bench,op,object_size,offered_rate,samples,achieved_rate,p50_ns,p90_ns,
//! p99_ns,mean_ns,submitting_mean_ns,queue_mean_ns,multicast_mean_ns,
//! processing_mean_ns,persistence_mean_ns,reply_mean_ns,enqueue_mean_ns,
//! dequeue_mean_ns,saturated
//! ```
//!
//! `saturated` is set when p99 exceeds ten times the p99 measured at a tenth
//! of the offered rate.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::stats::{mean, Summary};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub bench: String,
    pub op: String,
    pub object_size: usize,
    pub offered_rate: f64,
    pub op_id: u64,
    pub stage: u32,
    pub send_offset_ns: u64,
    pub latency_ns: u64,
    pub submitting_ns: u64,
    pub queue_ns: u64,
    pub multicast_ns: u64,
    pub processing_ns: u64,
    pub persistence_ns: u64,
    pub reply_ns: u64,
    pub enqueue_ns: u64,
    pub dequeue_ns: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub bench: String,
    pub op: String,
    pub object_size: usize,
    pub offered_rate: f64,
    pub samples: usize,
    pub achieved_rate: f64,
    pub p50_ns: u64,
    pub p90_ns: u64,
    pub p99_ns: u64,
    pub mean_ns: f64,
    pub submitting_mean_ns: f64,
    pub queue_mean_ns: f64,
    pub multicast_mean_ns: f64,
    pub processing_mean_ns: f64,
    pub persistence_mean_ns: f64,
    pub reply_mean_ns: f64,
    pub enqueue_mean_ns: f64,
    pub dequeue_mean_ns: f64,
    pub saturated: bool,
}

impl SummaryRow {
    /// Summarizes the end-to-end rows (stage 0) of `samples`.
    pub fn from_samples(samples: &[Sample], achieved_rate: f64) -> Self {
        let e2e: Vec<&Sample> = samples.iter().filter(|s| s.stage == 0).collect();
        let first = e2e.first().copied().cloned().unwrap_or_default();
        let col = |f: fn(&Sample) -> u64| mean(&e2e.iter().map(|s| f(s)).collect::<Vec<_>>());
        let lat = Summary::of(&e2e.iter().map(|s| s.latency_ns).collect::<Vec<_>>());
        SummaryRow {
            bench: first.bench,
            op: first.op,
            object_size: first.object_size,
            offered_rate: first.offered_rate,
            samples: lat.count,
            achieved_rate,
            p50_ns: lat.p50_ns,
            p90_ns: lat.p90_ns,
            p99_ns: lat.p99_ns,
            mean_ns: lat.mean_ns,
            submitting_mean_ns: col(|s| s.submitting_ns),
            queue_mean_ns: col(|s| s.queue_ns),
            multicast_mean_ns: col(|s| s.multicast_ns),
            processing_mean_ns: col(|s| s.processing_ns),
            persistence_mean_ns: col(|s| s.persistence_ns),
            reply_mean_ns: col(|s| s.reply_ns),
            enqueue_mean_ns: col(|s| s.enqueue_ns),
            dequeue_mean_ns: col(|s| s.dequeue_ns),
            saturated: false,
        }
    }

    /// Sum of the put breakdown means.
    pub fn breakdown_sum_ns(&self) -> f64 {
        self.submitting_mean_ns
            + self.queue_mean_ns
            + self.multicast_mean_ns
            + self.processing_mean_ns
            + self.persistence_mean_ns
            + self.reply_mean_ns
    }
}

/// Samples and summary rows from one bench invocation.
#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub samples: Vec<Sample>,
    pub rows: Vec<SummaryRow>,
}

impl BenchReport {
    pub fn merge(&mut self, other: BenchReport) {
        self.samples.extend(other.samples);
        self.rows.extend(other.rows);
    }

    pub fn write_samples(&self, w: impl io::Write) -> csv::Result<()> {
        write_rows(w, &self.samples)
    }

    pub fn write_summary(&self, w: impl io::Write) -> csv::Result<()> {
        write_rows(w, &self.rows)
    }

    pub fn save(&self, samples: &Path, summary: &Path) -> csv::Result<()> {
        self.write_samples(std::fs::File::create(samples)?)?;
        self.write_summary(std::fs::File::create(summary)?)
    }
}

fn write_rows<T: Serialize>(w: impl io::Write, rows: &[T]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const SAMPLE_HEADER: &str = "bench,op,object_size,offered_rate,op_id,stage,send_offset_ns,latency_ns,submitting_ns,queue_ns,multicast_ns,processing_ns,persistence_ns,reply_ns,enqueue_ns,dequeue_ns";
pub const SUMMARY_HEADER: &str = "bench,op,object_size,offered_rate,samples,achieved_rate,p50_ns,p90_ns,p99_ns,mean_ns,submitting_mean_ns,queue_mean_ns,multicast_mean_ns,processing_mean_ns,persistence_mean_ns,reply_mean_ns,enqueue_mean_ns,dequeue_mean_ns,saturated";
