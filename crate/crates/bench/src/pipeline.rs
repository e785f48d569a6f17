//! The k-stage no-op pipeline.
//!
//! Starts an in-process loopback cluster whose DFG chains pools
//! `/stage1 .. /stagek`. Every vertex runs a probe that stamps the object's
//! arrival and forwards it unchanged; the last one only stamps. Injection
//! and probes share one process, so all stamps come from one clock.
//!
//! A run has two phases. The latency phase injects at a low fixed rate from
//! one client. The throughput phase injects as fast as several clients can
//! and divides the object count by the time until the last one leaves the
//! final stage.

use std::collections::HashMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use bytes::{BufMut, Bytes, BytesMut};
use kvflow_core::dfg::{DfgDescriptor, LambdaContext, LambdaRegistry, PutType};
use kvflow_core::{Error, Persistence, PoolDescriptor, Result};
use kvflow_node::{Client, ClusterSpec, LocalCluster};
use parking_lot::{Condvar, Mutex};

use crate::put::sleep_until;
use crate::report::{BenchReport, Sample, SummaryRow};
use crate::stats::Summary;

#[derive(Clone, Debug)]
pub struct PipelineBenchConfig {
    pub stages: usize,
    /// Trigger or volatile edges; injection into the first stage uses the
    /// same kind of put.
    pub edge: PutType,
    pub object_size: usize,
    /// Ops per second in the latency phase.
    pub rate: f64,
    pub latency_ops: u64,
    /// Zero skips the throughput phase.
    pub throughput_ops: u64,
    pub injectors: usize,
    pub nodes: u32,
    pub timeout: Duration,
}

impl PipelineBenchConfig {
    pub fn new(stages: usize, edge: PutType) -> Self {
        PipelineBenchConfig {
            stages,
            edge,
            object_size: 1024,
            rate: 200.0,
            latency_ops: 400,
            throughput_ops: 2000,
            injectors: 4,
            nodes: 3,
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub report: BenchReport,
    pub median_ns: u64,
    /// Objects per second through every stage; 0 when the phase was skipped.
    pub throughput: f64,
}

fn edge_name(edge: PutType) -> &'static str {
    match edge {
        PutType::Trigger => "trigger",
        PutType::Volatile => "volatile",
        PutType::Persistent => "persistent",
    }
}

/// The DFG for `stages` no-op vertices joined by `edge` edges.
pub fn noop_pipeline(stages: usize, edge: PutType) -> DfgDescriptor {
    let pools: Vec<String> = (1..=stages).map(|i| format!("/stage{i}")).collect();
    let vertices: Vec<_> = (1..=stages)
        .map(|i| serde_json::json!({"id": format!("v{i}"), "lambda": "probe", "prefix": format!("/stage{i}")}))
        .collect();
    let edges: Vec<_> = (1..stages)
        .map(|i| {
            serde_json::json!({"from": format!("v{i}"), "to": format!("/stage{}", i + 1), "put_type": edge_name(edge)})
        })
        .collect();
    let json = serde_json::json!({"pools": pools, "vertices": vertices, "edges": edges});
    DfgDescriptor::parse(json.to_string().as_bytes()).expect("generated DFG parses")
}

#[derive(Default)]
struct Trace {
    sent: Option<Instant>,
    /// Arrival and queue wait per stage.
    stages: Vec<Option<(Instant, u64)>>,
}

struct Recorder {
    stages: usize,
    traces: Mutex<HashMap<u64, Trace>>,
    finished: Mutex<u64>,
    done: Condvar,
}

impl Recorder {
    fn sent(&self, id: u64, at: Instant) {
        self.traces.lock().entry(id).or_default().sent = Some(at);
    }

    fn arrived(&self, id: u64, stage: usize, at: Instant, queue_ns: u64) {
        {
            let mut traces = self.traces.lock();
            let t = traces.entry(id).or_default();
            t.stages.resize(self.stages, None);
            t.stages[stage - 1] = Some((at, queue_ns));
        }
        if stage == self.stages {
            *self.finished.lock() += 1;
            self.done.notify_all();
        }
    }

    fn reset(&self) {
        self.traces.lock().clear();
        *self.finished.lock() = 0;
    }

    fn wait_finished(&self, n: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut f = self.finished.lock();
        while *f < n {
            if self.done.wait_until(&mut f, deadline).timed_out() {
                return *f >= n;
            }
        }
        true
    }

    fn last_arrival(&self) -> Option<Instant> {
        self.traces
            .lock()
            .values()
            .filter_map(|t| t.stages.last().copied().flatten())
            .map(|s| s.0)
            .max()
    }
}

fn probe(rec: Arc<Recorder>) -> impl Fn(&LambdaContext<'_>) -> Result<()> + Send + Sync {
    move |ctx| {
        let at = Instant::now();
        let ev = ctx.event();
        let stage: usize = ctx.vertex_id()[1..]
            .parse()
            .map_err(|_| Error::Config("probe vertex id".into()))?;
        let payload = ctx.payload();
        let id = u64::from_le_bytes(
            payload[..8]
                .try_into()
                .map_err(|_| Error::Config("short payload".into()))?,
        );
        rec.arrived(
            id,
            stage,
            at,
            (ev.dequeued_at - ev.enqueued_at).as_nanos() as u64,
        );
        if stage < rec.stages {
            ctx.emit(payload.clone(), ctx.key().suffix())?;
        }
        Ok(())
    }
}

fn payload(id: u64, size: usize) -> Bytes {
    let mut b = BytesMut::with_capacity(size.max(8));
    b.put_u64_le(id);
    b.resize(size.max(8), 0x5a);
    b.freeze()
}

fn inject(client: &Client, edge: PutType, id: u64, size: usize, rec: &Recorder) -> Result<()> {
    // cycle over a bounded key set so stored pools stay small
    let key = format!("/stage1/obj{}", id % 1024);
    let p = payload(id, size);
    rec.sent(id, Instant::now());
    match edge {
        PutType::Trigger => client.trigger_put(&key, p),
        _ => client.put(&key, p).map(|_| ()),
    }
}

/// Runs both phases on a fresh cluster.
pub fn run_pipeline_bench(cfg: &PipelineBenchConfig) -> Result<PipelineResult> {
    if cfg.stages == 0 || cfg.rate <= 0.0 {
        return Err(Error::Config("stages and rate must be positive".into()));
    }
    let persistence = match cfg.edge {
        PutType::Persistent => Persistence::Persistent,
        _ => Persistence::Volatile,
    };
    let dir = tempfile::tempdir()?;
    let mut spec = ClusterSpec::new(cfg.nodes, dir.path()).dfg(noop_pipeline(cfg.stages, cfg.edge));
    for i in 1..=cfg.stages {
        spec = spec.pool(
            PoolDescriptor::new(&format!("/stage{i}"), persistence).with_replication(cfg.nodes),
        );
    }
    let rec = Arc::new(Recorder {
        stages: cfg.stages,
        traces: Mutex::new(HashMap::new()),
        finished: Mutex::new(0),
        done: Condvar::new(),
    });
    let r = Arc::clone(&rec);
    let cluster = LocalCluster::start(spec, move |_| {
        LambdaRegistry::new().with("probe", probe(Arc::clone(&r)))
    })?;
    let result = run_phases(&cluster, cfg, &rec);
    cluster.shutdown();
    result
}

fn run_phases(
    cluster: &LocalCluster,
    cfg: &PipelineBenchConfig,
    rec: &Arc<Recorder>,
) -> Result<PipelineResult> {
    let op = format!("{}/k{}", edge_name(cfg.edge), cfg.stages);
    let base = Sample {
        bench: "pipeline".into(),
        op: op.clone(),
        object_size: cfg.object_size,
        offered_rate: cfg.rate,
        ..Default::default()
    };

    // warm up connections and every stage
    let client = cluster.client()?;
    let warm = 16u64;
    for id in 0..warm {
        inject(&client, cfg.edge, u64::MAX - id, cfg.object_size, rec)?;
    }
    if !rec.wait_finished(warm, cfg.timeout) {
        return Err(Error::Timeout("pipeline warm-up".into()));
    }
    rec.reset();

    let interval = Duration::from_secs_f64(1.0 / cfg.rate);
    let start = Instant::now();
    for id in 0..cfg.latency_ops {
        let scheduled = start + interval.mul_f64(id as f64);
        sleep_until(scheduled);
        inject(&client, cfg.edge, id, cfg.object_size, rec)?;
    }
    if !rec.wait_finished(cfg.latency_ops, cfg.timeout) {
        return Err(Error::Timeout(format!("{op}: latency phase incomplete")));
    }
    let mut samples = Vec::new();
    {
        let traces = rec.traces.lock();
        let mut ids: Vec<&u64> = traces.keys().collect();
        ids.sort_unstable();
        for id in ids {
            let t = &traces[id];
            let sent = t.sent.expect("sent stamped before injection");
            let arrivals: Vec<(Instant, u64)> = t
                .stages
                .iter()
                .map(|s| s.expect("every stage reached"))
                .collect();
            let end = arrivals.last().expect("at least one stage").0;
            let send_offset_ns = (sent - start).as_nanos() as u64;
            samples.push(Sample {
                op_id: *id,
                send_offset_ns,
                latency_ns: (end - sent).as_nanos() as u64,
                queue_ns: arrivals.iter().map(|a| a.1).sum(),
                ..base.clone()
            });
            let mut prev = sent;
            for (i, (at, q)) in arrivals.iter().enumerate() {
                samples.push(Sample {
                    op_id: *id,
                    stage: i as u32 + 1,
                    send_offset_ns,
                    latency_ns: (*at - prev).as_nanos() as u64,
                    queue_ns: *q,
                    ..base.clone()
                });
                prev = *at;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let latency_row = SummaryRow::from_samples(&samples, cfg.latency_ops as f64 / elapsed);
    let median_ns = Summary::of(
        &samples
            .iter()
            .filter(|s| s.stage == 0)
            .map(|s| s.latency_ns)
            .collect::<Vec<_>>(),
    )
    .p50_ns;
    let mut rows = vec![latency_row];

    let mut throughput = 0.0;
    if cfg.throughput_ops > 0 {
        rec.reset();
        let injectors = cfg.injectors.max(1) as u64;
        let clients: Vec<Client> = (0..injectors)
            .map(|_| cluster.client())
            .collect::<Result<_>>()?;
        let first = cfg.latency_ops;
        let t0 = Instant::now();
        let handles: Vec<_> = clients
            .into_iter()
            .enumerate()
            .map(|(j, c)| {
                let rec = Arc::clone(rec);
                let (edge, size, total) = (cfg.edge, cfg.object_size, cfg.throughput_ops);
                thread::spawn(move || -> Result<()> {
                    let mut id = j as u64;
                    while id < total {
                        inject(&c, edge, first + id, size, &rec)?;
                        id += injectors;
                    }
                    c.close();
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("injector thread")?;
        }
        if !rec.wait_finished(cfg.throughput_ops, cfg.timeout) {
            return Err(Error::Timeout(format!("{op}: throughput phase incomplete")));
        }
        let end = rec.last_arrival().unwrap_or_else(Instant::now);
        throughput = cfg.throughput_ops as f64 / (end - t0).as_secs_f64();
        rows.push(SummaryRow {
            bench: "pipeline".into(),
            op: format!("{op}/max"),
            object_size: cfg.object_size,
            samples: cfg.throughput_ops as usize,
            achieved_rate: throughput,
            ..Default::default()
        });
    }
    client.close();
    Ok(PipelineResult {
        report: BenchReport { samples, rows },
        median_ns,
        throughput,
    })
}
