//! Fast-path breakdown on a single in-process dispatcher.
//!
//! Objects go through one at a time (closed loop) so queueing behind other
//! events does not blur the components:
//!
//! - enqueue: materializing the object (payload copy and checksum) plus
//!   matching and placing the event on its queue
//! - dequeue: from being queued to a worker taking the event
//! - processing: the no-op lambda itself
//!
//! The trie cost is measured separately as the slope of match time against
//! key depth, on a trie holding one registration per level.

use std::hint::black_box;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::bounded;
use kvflow_core::fastpath::{
    DispatchPolicy, FastPath, FastPathConfig, LambdaRegistration, ObjectRef, PrefixTrie,
};
use kvflow_core::shard::VersionedObject;
use kvflow_core::{Error, ObjectKey, Result, Version};

use crate::report::{BenchReport, Sample, SummaryRow};
use crate::stats::{slope, Summary};

#[derive(Clone, Debug)]
pub struct FastpathBenchConfig {
    pub object_size: usize,
    pub policy: DispatchPolicy,
    pub events: u64,
    pub workers: usize,
    /// Depths probed for the per-level trie cost.
    pub max_depth: usize,
}

impl FastpathBenchConfig {
    pub fn new(object_size: usize, policy: DispatchPolicy) -> Self {
        FastpathBenchConfig {
            object_size,
            policy,
            events: 2000,
            workers: 4,
            max_depth: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FastpathResult {
    pub report: BenchReport,
    pub enqueue: Summary,
    pub dequeue: Summary,
    pub trie_per_level_ns: f64,
}

pub fn policy_name(p: DispatchPolicy) -> &'static str {
    match p {
        DispatchPolicy::RoundRobin => "round_robin",
        DispatchPolicy::FifoByKey => "fifo_by_key",
    }
}

struct Stamp {
    enqueued: Instant,
    dequeued: Instant,
    started: Instant,
    finished: Instant,
}

pub fn run_fastpath_bench(cfg: &FastpathBenchConfig) -> Result<FastpathResult> {
    let fp = FastPath::new(FastPathConfig {
        workers: cfg.workers.max(1),
        ..FastPathConfig::default()
    });
    let (tx, rx) = bounded::<Stamp>(1);
    let noop = move |ev: &kvflow_core::fastpath::UpcallEvent| {
        let started = Instant::now();
        black_box(ev.object.payload().len());
        let _ = tx.send(Stamp {
            enqueued: ev.enqueued_at,
            dequeued: ev.dequeued_at,
            started,
            finished: Instant::now(),
        });
        Ok(())
    };
    fp.register(LambdaRegistration::new(
        "noop",
        "/bench",
        cfg.policy,
        Arc::new(noop),
    ))?;

    let source = vec![0x3cu8; cfg.object_size];
    let op = policy_name(cfg.policy);
    let base = Sample {
        bench: "fastpath".into(),
        op: op.into(),
        object_size: cfg.object_size,
        ..Default::default()
    };
    let keys: Vec<ObjectKey> = (0..64)
        .map(|i| ObjectKey::compose("/bench", &format!("k{i}")))
        .collect::<Result<_>>()?;
    let warm = (cfg.events / 10).max(10);
    let mut samples = Vec::with_capacity(cfg.events as usize);
    let run_start = Instant::now();
    for i in 0..warm + cfg.events {
        let t0 = Instant::now();
        let obj = VersionedObject::new(
            keys[(i % keys.len() as u64) as usize].clone(),
            Bytes::copy_from_slice(&source),
            Version {
                per_key_version: i / keys.len() as u64,
                shard_seq: i,
                timestamp_us: i,
            },
            None,
        );
        fp.dispatch(ObjectRef::Stored(Arc::new(obj)));
        let t1 = Instant::now();
        let s = rx
            .recv_timeout(Duration::from_secs(10))
            .map_err(|_| Error::Timeout("no-op upcall".into()))?;
        if i < warm {
            continue;
        }
        let ns = |a: Instant, b: Instant| b.saturating_duration_since(a).as_nanos() as u64;
        samples.push(Sample {
            op_id: i - warm,
            send_offset_ns: ns(run_start, t0),
            latency_ns: ns(t0, s.finished),
            enqueue_ns: ns(t0, t1),
            dequeue_ns: ns(s.enqueued, s.dequeued),
            processing_ns: ns(s.started, s.finished),
            ..base.clone()
        });
    }
    fp.shutdown();

    let elapsed = run_start.elapsed().as_secs_f64();
    let enqueue = Summary::of(&samples.iter().map(|s| s.enqueue_ns).collect::<Vec<_>>());
    let dequeue = Summary::of(&samples.iter().map(|s| s.dequeue_ns).collect::<Vec<_>>());
    let trie_per_level_ns = trie_per_level_ns(cfg.max_depth.max(2));
    let row = SummaryRow::from_samples(&samples, samples.len() as f64 / elapsed);
    let trie_row = SummaryRow {
        bench: "fastpath".into(),
        op: "trie_per_level".into(),
        mean_ns: trie_per_level_ns,
        p50_ns: trie_per_level_ns.max(0.0).round() as u64,
        ..Default::default()
    };
    Ok(FastpathResult {
        report: BenchReport {
            samples,
            rows: vec![row, trie_row],
        },
        enqueue,
        dequeue,
        trie_per_level_ns,
    })
}

/// Nanoseconds of match time per key-depth level.
///
/// The trie holds `/l1`, `/l1/l2`, ... down to `max_depth` plus unrelated
/// siblings at every level, so a key of depth `d` walks `d` nodes and yields
/// `d` matches.
pub fn trie_per_level_ns(max_depth: usize) -> f64 {
    let noop: Arc<dyn kvflow_core::fastpath::Upcall> =
        Arc::new(|_: &kvflow_core::fastpath::UpcallEvent| Ok(()));
    let mut trie = PrefixTrie::new();
    let mut prefix = String::new();
    for level in 1..=max_depth {
        for sib in 0..8 {
            let p = format!("{prefix}/x{sib}");
            trie.insert(Arc::new(LambdaRegistration::new(
                "sib",
                &p,
                DispatchPolicy::RoundRobin,
                Arc::clone(&noop),
            )));
        }
        prefix.push_str(&format!("/l{level}"));
        trie.insert(Arc::new(LambdaRegistration::new(
            "chain",
            &prefix,
            DispatchPolicy::RoundRobin,
            Arc::clone(&noop),
        )));
    }
    let iters = 20_000;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for depth in 1..=max_depth {
        let path: String = (1..=depth).map(|l| format!("/l{l}")).collect();
        // best of several rounds filters out scheduler noise
        let best = (0..5)
            .map(|_| {
                let t = Instant::now();
                for _ in 0..iters {
                    let mut n = 0usize;
                    trie.for_each_match(black_box(&path), |_| n += 1);
                    black_box(n);
                }
                t.elapsed().as_nanos() as f64 / iters as f64
            })
            .fold(f64::INFINITY, f64::min);
        xs.push(depth as f64);
        ys.push(best);
    }
    slope(&xs, &ys)
}
