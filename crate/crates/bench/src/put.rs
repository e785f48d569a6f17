//! Open-loop put load against a running cluster.
//!
//! Each client thread has its own connection and issues ops on a fixed
//! schedule regardless of how earlier ops fare. Latency runs from the
//! scheduled time to the reply, so time spent blocked on a full window
//! counts against the op.

use std::net::SocketAddr;
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::unbounded;
use kvflow_core::{Error, Result};
use kvflow_node::{Client, PendingPut};

use crate::report::{BenchReport, Sample, SummaryRow};
use crate::stats::Summary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpType {
    Trig,
    Vola,
    Pers,
}

impl OpType {
    pub fn as_str(self) -> &'static str {
        match self {
            OpType::Trig => "trig",
            OpType::Vola => "vola",
            OpType::Pers => "pers",
        }
    }
}

impl FromStr for OpType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trig" => Ok(OpType::Trig),
            "vola" => Ok(OpType::Vola),
            "pers" => Ok(OpType::Pers),
            _ => Err(format!("unknown op {s:?}; expected trig, vola or pers")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PutBenchConfig {
    pub op: OpType,
    pub object_size: usize,
    /// Offered ops per second across all clients.
    pub rate: f64,
    pub duration: Duration,
    pub clients: usize,
    /// Distinct keys cycled through.
    pub keys: usize,
    pub vola_pool: String,
    pub pers_pool: String,
    /// Pool targeted by trigger puts.
    pub trig_pool: String,
    /// p99 under light load; measured at a tenth of `rate` when unset.
    pub baseline_p99_ns: Option<u64>,
    /// Skip the light-load run, leaving `saturated` false.
    pub skip_saturation_check: bool,
}

impl PutBenchConfig {
    pub fn new(op: OpType, object_size: usize, rate: f64, duration: Duration) -> Self {
        PutBenchConfig {
            op,
            object_size,
            rate,
            duration,
            clients: 1,
            keys: 16,
            vola_pool: "/vola".into(),
            pers_pool: "/pers".into(),
            trig_pool: "/vola".into(),
            baseline_p99_ns: None,
            skip_saturation_check: false,
        }
    }

    fn pool(&self) -> &str {
        match self.op {
            OpType::Trig => &self.trig_pool,
            OpType::Vola => &self.vola_pool,
            OpType::Pers => &self.pers_pool,
        }
    }
}

/// Timer wake-ups can run this late; the rest of the wait yields instead.
const SPIN_NS: u64 = 200_000;

/// Waits until `at`. Schedules are absolute, so a late wake-up for one op
/// does not shift the ones after it.
pub fn sleep_until(at: Instant) {
    let now = Instant::now();
    if at <= now {
        return;
    }
    let left = at - now;
    if left > Duration::from_nanos(SPIN_NS) {
        thread::sleep(left - Duration::from_nanos(SPIN_NS));
    }
    while Instant::now() < at {
        thread::yield_now();
    }
}

/// Runs the configured load and, unless disabled, a light-load run at a
/// tenth of the rate to judge saturation.
pub fn run_put_bench(addr: SocketAddr, cfg: &PutBenchConfig) -> Result<BenchReport> {
    let baseline = match (cfg.baseline_p99_ns, cfg.skip_saturation_check) {
        (_, true) => None,
        (Some(b), false) => Some(b),
        (None, false) => Some(light_load_p99(addr, cfg, cfg.rate / 10.0)?),
    };
    let mut report = run_once(addr, cfg)?;
    if let Some(b) = baseline {
        for row in &mut report.rows {
            row.saturated = row.p99_ns > b.saturating_mul(10);
        }
    }
    Ok(report)
}

/// Runs one configuration per rate, judging saturation against the p99 at a
/// tenth of the highest rate.
pub fn run_rate_sweep(
    addr: SocketAddr,
    cfg: &PutBenchConfig,
    rates: &[f64],
) -> Result<BenchReport> {
    let top = rates.iter().copied().fold(0.0, f64::max);
    let baseline = light_load_p99(addr, cfg, top / 10.0)?;
    let mut out = BenchReport::default();
    for &rate in rates {
        let c = PutBenchConfig {
            rate,
            baseline_p99_ns: Some(baseline),
            ..cfg.clone()
        };
        out.merge(run_put_bench(addr, &c)?);
    }
    Ok(out)
}

fn light_load_p99(addr: SocketAddr, cfg: &PutBenchConfig, rate: f64) -> Result<u64> {
    // long enough for at least 50 samples, at most 5 s
    let secs = (50.0 / rate.max(1e-3)).clamp(cfg.duration.as_secs_f64().min(1.0), 5.0);
    let light = PutBenchConfig {
        rate,
        duration: Duration::from_secs_f64(secs),
        ..cfg.clone()
    };
    Ok(run_once(addr, &light)?.rows[0].p99_ns)
}

struct Issued {
    id: u64,
    scheduled: Instant,
    pending: PendingPut,
}

fn run_once(addr: SocketAddr, cfg: &PutBenchConfig) -> Result<BenchReport> {
    if cfg.rate <= 0.0 || cfg.clients == 0 {
        return Err(Error::Config("rate and clients must be positive".into()));
    }
    let clients: Vec<Client> = (0..cfg.clients)
        .map(|_| Client::connect(addr))
        .collect::<Result<_>>()?;
    let payload = Bytes::from(vec![0xa5u8; cfg.object_size]);
    let keys: Vec<String> = (0..cfg.keys.max(1))
        .map(|k| format!("{}/bench{k}", cfg.pool()))
        .collect();
    // warm the connections so the first op does not pay for connecting
    for c in &clients {
        match cfg.op {
            OpType::Trig => c.trigger_put(&keys[0], payload.clone())?,
            _ => {
                c.put(&keys[0], payload.clone())?;
            }
        }
    }

    let interval = Duration::from_secs_f64(cfg.clients as f64 / cfg.rate);
    let per_client = ((cfg.duration.as_secs_f64() * cfg.rate) / cfg.clients as f64)
        .ceil()
        .max(1.0) as u64;
    let start = Instant::now() + Duration::from_millis(5);
    let threads: Vec<_> = clients
        .into_iter()
        .enumerate()
        .map(|(ci, client)| {
            let payload = payload.clone();
            let keys = keys.clone();
            let cfg = cfg.clone();
            thread::spawn(move || -> Result<Vec<Sample>> {
                let offset = interval.mul_f64(ci as f64 / cfg.clients as f64);
                let (tx, rx) = unbounded::<Issued>();
                let waiter = (cfg.op != OpType::Trig).then(|| {
                    let cfg = cfg.clone();
                    thread::spawn(move || -> Result<Vec<Sample>> {
                        let mut out = Vec::new();
                        for Issued {
                            id,
                            scheduled,
                            pending,
                        } in rx
                        {
                            let sent = pending.sent_at();
                            let r = pending.wait()?;
                            let arrived = sent + Duration::from_nanos(r.rtt_ns);
                            out.push(Sample {
                                op_id: id,
                                send_offset_ns: (sent - start).as_nanos() as u64,
                                latency_ns: (arrived - scheduled).as_nanos() as u64,
                                // waiting for a window slot or a late wake-up
                                // delays the send, so it counts as submitting
                                submitting_ns: (sent - scheduled).as_nanos() as u64
                                    + r.submitting_ns,
                                queue_ns: r.timing.queue_ns,
                                multicast_ns: r.timing.multicast_ns,
                                processing_ns: r.timing.processing_ns,
                                persistence_ns: r.timing.persistence_ns,
                                reply_ns: r.reply_ns,
                                ..base_sample(&cfg)
                            });
                        }
                        Ok(out)
                    })
                });
                let mut out = Vec::new();
                for i in 0..per_client {
                    let scheduled = start + offset + interval.mul_f64(i as f64);
                    sleep_until(scheduled);
                    let id = ci as u64 * per_client + i;
                    let key = &keys[(id % keys.len() as u64) as usize];
                    if cfg.op == OpType::Trig {
                        let sent = Instant::now();
                        client.trigger_put(key, payload.clone())?;
                        out.push(Sample {
                            op_id: id,
                            send_offset_ns: (sent - start).as_nanos() as u64,
                            latency_ns: scheduled.elapsed().as_nanos() as u64,
                            ..base_sample(&cfg)
                        });
                    } else {
                        let pending = client.put_async(key, payload.clone())?;
                        let _ = tx.send(Issued {
                            id,
                            scheduled,
                            pending,
                        });
                    }
                }
                drop(tx);
                if let Some(w) = waiter {
                    out = w.join().expect("waiter thread")?;
                }
                client.close();
                Ok(out)
            })
        })
        .collect();
    let mut samples = Vec::new();
    for t in threads {
        samples.extend(t.join().expect("client thread")?);
    }
    let elapsed = start.elapsed().as_secs_f64();
    samples.sort_by_key(|s| s.op_id);
    let mut row = SummaryRow::from_samples(&samples, samples.len() as f64 / elapsed);
    row.offered_rate = cfg.rate;
    Ok(BenchReport {
        samples,
        rows: vec![row],
    })
}

fn base_sample(cfg: &PutBenchConfig) -> Sample {
    Sample {
        bench: "put".into(),
        op: cfg.op.as_str().into(),
        object_size: cfg.object_size,
        offered_rate: cfg.rate,
        ..Default::default()
    }
}

/// Ops per second at which ops were actually sent, from the send offsets of
/// end-to-end samples.
pub fn injection_rate(samples: &[Sample]) -> f64 {
    let offs: Vec<u64> = samples
        .iter()
        .filter(|s| s.stage == 0)
        .map(|s| s.send_offset_ns)
        .collect();
    let (Some(lo), Some(hi)) = (offs.iter().min(), offs.iter().max()) else {
        return 0.0;
    };
    if hi == lo {
        return 0.0;
    }
    (offs.len() - 1) as f64 / ((hi - lo) as f64 / 1e9)
}

/// Median end-to-end latency.
pub fn median_ns(report: &BenchReport) -> u64 {
    Summary::of(
        &report
            .samples
            .iter()
            .filter(|s| s.stage == 0)
            .map(|s| s.latency_ns)
            .collect::<Vec<_>>(),
    )
    .p50_ns
}
