//! Acceptance suite. Runs every criterion in turn and prints one PASS or
//! FAIL line per criterion, then a count of failures.
//!
//! Some criteria depend on the host (core count, timer resolution), so a
//! failure is reported but does not fail the run unless
//! `KVFLOW_ACCEPTANCE_STRICT=1` is set.
//!
//! `cargo test --test acceptance -- 3 8` runs only criteria 3 and 8.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write as _;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use kvflow_bench::fastpath::trie_per_level_ns;
use kvflow_bench::pipeline::{run_pipeline_bench, PipelineBenchConfig};
use kvflow_bench::put::{median_ns, run_put_bench, OpType, PutBenchConfig};
use kvflow_core::dfg::{DfgDescriptor, LambdaContext, LambdaRegistry, PutType};
use kvflow_core::fastpath::{
    DispatchPolicy, FastPath, FastPathConfig, LambdaRegistration, ObjectRef, PrefixTrie, Upcall,
    UpcallEvent, DEFAULT_QUEUE_BOUND,
};
use kvflow_core::log::{LogConfig, PersistentLog};
use kvflow_core::model::now_us;
use kvflow_core::shard::KvShard;
use kvflow_core::{Error, ObjectKey, Persistence, PoolDescriptor, Version};
use kvflow_node::wire::{Request, CLIENT_MAGIC};
use kvflow_node::{
    Client, ClusterSpec, LocalCluster, NodeAddr, PoolConfig, ServiceConfig, ShardId,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// Counts large allocations while armed, for the copy-discipline probe.
struct Probe;

static ARMED: AtomicBool = AtomicBool::new(false);
static THRESHOLD: AtomicUsize = AtomicUsize::new(usize::MAX);
static LARGE: AtomicUsize = AtomicUsize::new(0);

impl Probe {
    fn note(size: usize) {
        if ARMED.load(Ordering::Relaxed) && size >= THRESHOLD.load(Ordering::Relaxed) {
            LARGE.fetch_add(1, Ordering::Relaxed);
        }
    }
}

unsafe impl GlobalAlloc for Probe {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        Probe::note(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        Probe::note(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        Probe::note(new_size);
        System.realloc(ptr, layout, new_size)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static GLOBAL: Probe = Probe;

fn two_pools(dir: &Path) -> ClusterSpec {
    ClusterSpec::new(3, dir)
        .pool(PoolDescriptor::new("/vola", Persistence::Volatile).with_replication(3))
        .pool(PoolDescriptor::new("/pers", Persistence::Persistent).with_replication(3))
}

// 1
fn torn_reads() -> Outcome {
    let shard = KvShard::new(Persistence::Volatile);
    let key = ObjectKey::compose("/a1", "k").map_err(err)?;
    let fill = |seq: u64, size: usize| {
        let mut v = vec![seq as u8; size];
        v[..8].copy_from_slice(&seq.to_le_bytes());
        Bytes::from(v)
    };
    let mut w = shard.writer();
    w.apply_put(fill(1, 1024), key.clone(), 1, now_us());
    let stop = Arc::new(AtomicBool::new(false));
    let start = Instant::now();
    let readers: Vec<_> = (0..8)
        .map(|_| {
            let (shard, key, stop) = (Arc::clone(&shard), key.clone(), Arc::clone(&stop));
            thread::spawn(move || {
                let (mut reads, mut bad, mut exhausted) = (0u64, 0u64, 0u64);
                while !stop.load(Ordering::Relaxed) {
                    match shard.get_current(&key) {
                        Ok(o) => {
                            reads += 1;
                            let seq = u64::from_le_bytes(o.payload[..8].try_into().unwrap());
                            let body_ok = o.payload[8..].iter().all(|&b| b == seq as u8);
                            if !o.checksum_ok() || seq != o.version.shard_seq || !body_ok {
                                bad += 1;
                            }
                        }
                        Err(Error::RetryExhausted(_)) => exhausted += 1,
                        Err(_) => bad += 1,
                    }
                }
                (reads, bad, exhausted)
            })
        })
        .collect();
    let mut rng = StdRng::seed_from_u64(1);
    let mut seq = 1;
    while start.elapsed() < Duration::from_secs(10) {
        seq += 1;
        let size = rng.random_range(1024..=1 << 20);
        w.apply_put(fill(seq, size), key.clone(), seq, now_us());
    }
    stop.store(true, Ordering::Relaxed);
    let (mut reads, mut bad, mut exhausted) = (0, 0, 0);
    for r in readers {
        let (a, b, c) = r.join().map_err(|_| "reader panicked".to_string())?;
        reads += a;
        bad += b;
        exhausted += c;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        bad == 0 && exhausted == 0 && reads > 0 && secs < 30.0,
        format!("{seq} writes, {reads} reads, {bad} checksum violations, {exhausted} RetryExhausted in {secs:.1}s"),
    )
}

// 2
fn agreement() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let c = LocalCluster::start(
        two_pools(dir.path()).tweak(|c| c.trace_deliveries = true),
        |_| LambdaRegistry::new(),
    )
    .map_err(err)?;
    let writers: Vec<_> = (0..3u64)
        .map(|w| {
            let client = c.client().map_err(err)?;
            Ok(thread::spawn(move || -> Result<u64, String> {
                let mut rng = StdRng::seed_from_u64(w);
                let n = if w == 2 { 3334 } else { 3333 };
                let mut pending = Vec::with_capacity(n);
                for i in 0..n {
                    let pool = if rng.random_bool(0.5) {
                        "/vola"
                    } else {
                        "/pers"
                    };
                    let key = format!("{pool}/k{}", rng.random_range(0..50));
                    let mut p = vec![0u8; rng.random_range(16..2048)];
                    rng.fill(&mut p[..]);
                    p[..8].copy_from_slice(&((w << 32) | i as u64).to_le_bytes());
                    pending.push(client.put_async(&key, Bytes::from(p)).map_err(err)?);
                }
                let mut done = 0;
                for p in pending {
                    p.wait().map_err(err)?;
                    done += 1;
                }
                client.close();
                Ok(done)
            }))
        })
        .collect::<Result<_, String>>()?;
    let mut total = 0;
    for h in writers {
        total += h.join().map_err(|_| "writer panicked".to_string())??;
    }
    let mut details = Vec::new();
    let mut ok = total == 10_000;
    for pool in ["/vola", "/pers"] {
        let shard = ShardId::new(pool, 0);
        let reps: Vec<_> = c.nodes().filter_map(|n| n.replica(&shard)).collect();
        ok &= reps.len() == 3;
        let tables: Vec<_> = reps.iter().map(|r| r.store().table_snapshot()).collect();
        let traces: Vec<_> = reps.iter().map(|r| r.trace()).collect();
        ok &= tables.iter().all(|t| *t == tables[0]) && traces.iter().all(|t| *t == traces[0]);
        details.push(format!(
            "{pool}: {} deliveries, {} keys",
            traces[0].len(),
            tables[0].len()
        ));
        if pool == "/pers" {
            let logs: Vec<_> = reps
                .iter()
                .map(|r| r.log().unwrap().records())
                .collect::<Result<_, _>>()
                .map_err(err)?;
            ok &= logs.iter().all(|l| *l == logs[0]) && logs[0].len() == traces[0].len();
            details.push(format!("{} log records", logs[0].len()));
        }
    }
    c.shutdown();
    let secs = start.elapsed().as_secs_f64();
    check(
        ok && secs < 60.0,
        format!(
            "{total} puts; {}; identical on 3 members; {secs:.1}s",
            details.join(", ")
        ),
    )
}

// 3
struct Proc {
    children: Vec<Option<Child>>,
}

impl Proc {
    fn kill(&mut self, id: u32) {
        if let Some(mut c) = self.children[id as usize - 1].take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        for id in 1..=self.children.len() as u32 {
            self.kill(id);
        }
    }
}

fn spawn_cluster(root: &Path, pools: Vec<PoolConfig>) -> Result<(Proc, Vec<SocketAddr>), String> {
    let listeners: Vec<TcpListener> = (0..3)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let addrs: Vec<SocketAddr> = listeners.iter().map(|l| l.local_addr().unwrap()).collect();
    drop(listeners);
    let nodes: Vec<NodeAddr> = addrs
        .iter()
        .enumerate()
        .map(|(i, a)| NodeAddr {
            id: i as u32 + 1,
            addr: *a,
        })
        .collect();
    let mut children = Vec::new();
    for id in 1..=3u32 {
        let mut cfg = ServiceConfig::new(
            id,
            addrs[id as usize - 1],
            nodes.clone(),
            pools.clone(),
            root.join("logs"),
        );
        cfg.workers = 2;
        cfg.heartbeat_ms = 50;
        cfg.failure_timeout_ms = 400;
        cfg.commit_timeout_ms = 2000;
        let path = root.join(format!("node{id}.json"));
        std::fs::write(&path, cfg.to_json()).map_err(err)?;
        let child = Command::new(env!("CARGO_BIN_EXE_kvflow"))
            .args(["node", "start", "--config"])
            .arg(&path)
            .env("RUST_LOG", "error")
            .stdout(Stdio::null())
            .stderr(std::fs::File::create(root.join(format!("node{id}.err"))).map_err(err)?)
            .spawn()
            .map_err(err)?;
        children.push(Some(child));
    }
    Ok((Proc { children }, addrs))
}

fn connect_retrying(addr: SocketAddr, within: Duration) -> Result<Client, String> {
    let deadline = Instant::now() + within;
    loop {
        match Client::connect(addr) {
            Ok(c) => return Ok(c),
            Err(e) if Instant::now() > deadline => return Err(format!("connect {addr}: {e}")),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn log_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(rd) = std::fs::read_dir(dir) else {
        return out;
    };
    for e in rd.flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(log_files(&p));
        } else if p.extension().is_some_and(|x| x == "log") {
            out.push(p);
        }
    }
    out
}

type Committed = HashSet<(String, u64, Bytes)>;

fn recovered(path: &Path) -> Result<(Committed, Vec<u64>), String> {
    let (log, _) = PersistentLog::open(LogConfig::new(path)).map_err(err)?;
    let recs = log.records().map_err(err)?;
    log.close();
    let seqs = recs.iter().map(|r| r.version.shard_seq).collect();
    Ok((
        recs.into_iter()
            .map(|r| (r.key, r.version.per_key_version, r.payload))
            .collect(),
        seqs,
    ))
}

fn durability() -> Outcome {
    let start = Instant::now();
    let pools = vec![PoolConfig {
        descriptor: PoolDescriptor::new("/pers", Persistence::Persistent).with_replication(3),
        shard_members: vec![vec![1, 2, 3]],
    }];
    let mut rng = StdRng::seed_from_u64(3);
    let (mut total_committed, mut total_failed, mut torn_checked) = (0, 0, 0);
    for round in 0..20 {
        let dir = tempfile::tempdir().map_err(err)?;
        let (mut procs, addrs) = spawn_cluster(dir.path(), pools.clone())?;
        let client = connect_retrying(addrs[0], Duration::from_secs(15)).map_err(|e| {
            let log = std::fs::read_to_string(dir.path().join("node1.err")).unwrap_or_default();
            format!("{e}; node 1 said: {}", log.trim())
        })?;
        let kill_at = rng.random_range(25..475);
        let victim = rng.random_range(1..=3u32);
        let mut before: Vec<(String, u64, Bytes)> = Vec::new();
        let mut after: Vec<(String, u64, Bytes)> = Vec::new();
        for i in 0..500u32 {
            if i == kill_at {
                procs.kill(victim);
            }
            let key = format!("/pers/k{}", i % 25);
            let payload = Bytes::from(format!(
                "{round}:{i}:{}",
                "x".repeat(rng.random_range(0..512))
            ));
            match client.put(&key, payload.clone()) {
                Ok(r) => {
                    let entry = (key, r.version.per_key_version, payload);
                    if i < kill_at {
                        before.push(entry)
                    } else {
                        after.push(entry)
                    }
                }
                Err(_) => total_failed += 1,
            }
        }
        client.close();
        for id in 1..=3 {
            procs.kill(id);
        }
        total_committed += before.len() + after.len();
        for id in 1..=3u32 {
            let files = log_files(&dir.path().join("logs").join(format!("node{id}")));
            let [path] = &files[..] else {
                return Err(format!(
                    "round {round}: node {id} has {} log files",
                    files.len()
                ));
            };
            let (present, seqs) = recovered(path)?;
            if seqs.iter().enumerate().any(|(i, &s)| s != i as u64 + 1) {
                return Err(format!(
                    "round {round}: node {id} recovered a non-contiguous log"
                ));
            }
            let must: Vec<_> = if id == victim {
                before.iter().collect()
            } else {
                before.iter().chain(&after).collect()
            };
            if let Some(m) = must.iter().find(|e| !present.contains(*e)) {
                return Err(format!("round {round}: node {id} lost committed put {}#{} (victim {victim} at {kill_at})", m.0, m.1));
            }
            // cut the file inside its last record: recovery must drop exactly that record
            if id == victim && seqs.len() > 1 {
                let copy = dir.path().join("torn.log");
                let data = std::fs::read(path).map_err(err)?;
                let cut = data.len() - rng.random_range(1..8);
                std::fs::write(&copy, &data[..cut]).map_err(err)?;
                let (_, torn) = recovered(&copy)?;
                if torn.len() != seqs.len() - 1 {
                    return Err(format!(
                        "round {round}: torn tail left {} of {} records",
                        torn.len(),
                        seqs.len()
                    ));
                }
                torn_checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 300.0,
        format!(
            "20 kill points, {total_committed} committed puts all recovered, {total_failed} puts failed across kills, \
             {torn_checked} torn tails dropped; {secs:.0}s"
        ),
    )
}

// 4
fn temporal_oracle() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let (log, _) = PersistentLog::open(LogConfig::new(dir.path().join("t.log")).single_replica())
        .map_err(err)?;
    let mut rng = StdRng::seed_from_u64(4);
    let keys: Vec<String> = (0..10).map(|k| format!("/t/k{k}")).collect();
    let mut history: Vec<(usize, Version, Bytes)> = Vec::new();
    let mut per_key = [0u64; 10];
    let mut ts = 1_000;
    let mut last = None;
    for seq in 1..=1000u64 {
        ts += rng.random_range(1..=5);
        let k = rng.random_range(0..10);
        let version = Version {
            per_key_version: per_key[k],
            shard_seq: seq,
            timestamp_us: ts,
        };
        per_key[k] += 1;
        let payload = Bytes::from(format!("{k}:{seq}"));
        let key = ObjectKey::compose("/t", &format!("k{k}")).map_err(err)?;
        last = Some(log.append(&key, payload.clone(), version).map_err(err)?);
        history.push((k, version, payload));
    }
    last.unwrap().wait();
    let max_ts = ts;
    let oracle = |k: usize, t: u64| {
        history
            .iter()
            .filter(|h| h.0 == k && h.1.timestamp_us <= t)
            .last()
    };
    let (mut mismatches, mut boundary) = (0, 0);
    for q in 0..10_000 {
        let k = rng.random_range(0..10);
        let t = if q % 2 == 0 {
            boundary += 1;
            let h = &history[rng.random_range(0..history.len())];
            (h.1.timestamp_us as i64 + rng.random_range(-1..=1)) as u64
        } else {
            rng.random_range(0..max_ts + 20)
        };
        let want = oracle(k, t);
        let got = log.time_to_version(&keys[k], t);
        let agree = match (want, &got) {
            (Some(h), Ok(v)) => h.1 == *v,
            (None, Err(_)) => true,
            _ => false,
        };
        let agree = agree
            && (t > max_ts
                || match (want, log.get_by_time(&keys[k], t)) {
                    (Some(h), Ok(r)) => r.version == h.1 && r.payload == h.2,
                    (None, Err(_)) => true,
                    _ => false,
                });
        if !agree {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 10.0,
        format!("10000 queries ({boundary} at version boundaries), {mismatches} disagree with the scan; {secs:.2}s"),
    )
}

// 5
fn future_window() -> Outcome {
    // writeback left over from the crash rounds can stall a sync for tens of ms
    let _ = Command::new("sync").status();
    let dir = tempfile::tempdir().map_err(err)?;
    let c = LocalCluster::start(two_pools(dir.path()), |_| LambdaRegistry::new()).map_err(err)?;
    let client = c.client().map_err(err)?;
    let stop = Arc::new(AtomicBool::new(false));
    let writer = {
        let (client, stop) = (client.clone(), Arc::clone(&stop));
        thread::spawn(move || -> Result<Vec<(Version, Bytes)>, String> {
            let mut seen = Vec::new();
            let mut next = Instant::now();
            let mut i = 0u64;
            while !stop.load(Ordering::Relaxed) {
                let p = Bytes::from(format!("tick{i}"));
                seen.push((client.put("/pers/tick", p.clone()).map_err(err)?.version, p));
                i += 1;
                next += Duration::from_millis(10);
                kvflow_bench::put::sleep_until(next);
            }
            Ok(seen)
        })
    };
    thread::sleep(Duration::from_millis(300));
    let mut waits = Vec::new();
    let mut answers = Vec::new();
    for _ in 0..5 {
        let t = now_us() + 50_000;
        let s = Instant::now();
        let got = client.get_by_time("/pers/tick", t).map_err(err)?;
        waits.push(s.elapsed());
        answers.push((t, got));
        thread::sleep(Duration::from_millis(20));
    }
    thread::sleep(Duration::from_millis(100));
    stop.store(true, Ordering::Relaxed);
    let history = writer.join().map_err(|_| "writer panicked".to_string())??;
    c.shutdown();
    let correct = answers.iter().all(|(t, got)| {
        let want = history
            .iter()
            .filter(|h| h.0.timestamp_us <= *t)
            .max_by_key(|h| h.0.timestamp_us);
        want.is_some_and(|w| w.0 == got.version && w.1 == got.payload)
    });
    let within = waits
        .iter()
        .all(|w| *w >= Duration::from_millis(30) && *w <= Duration::from_millis(70));
    let ms: Vec<String> = waits
        .iter()
        .map(|w| format!("{:.1}", w.as_secs_f64() * 1e3))
        .collect();
    check(
        correct && within,
        format!(
            "blocked [{}] ms for t = now+50ms; answers match oracle: {correct}",
            ms.join(", ")
        ),
    )
}

// 6
fn components(p: &str) -> Vec<&str> {
    p.split('/').filter(|c| !c.is_empty()).collect()
}

fn trie_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(6);
    let alphabet = ["a", "b", "c", "d"];
    let path = |rng: &mut StdRng, depth: usize| -> String {
        (0..depth)
            .map(|_| format!("/{}", alphabet[rng.random_range(0..alphabet.len())]))
            .collect()
    };
    let noop: Arc<dyn Upcall> = Arc::new(|_: &UpcallEvent| Ok(()));
    let mut trie = PrefixTrie::new();
    let mut regs = Vec::new();
    for i in 0..1000 {
        let d = rng.random_range(1..=5);
        let prefix = path(&mut rng, d);
        let reg = Arc::new(LambdaRegistration::new(
            &format!("r{i}"),
            &prefix,
            DispatchPolicy::RoundRobin,
            Arc::clone(&noop),
        ));
        trie.insert(Arc::clone(&reg));
        regs.push(reg);
    }
    let (mut mismatches, mut matched) = (0, 0usize);
    for _ in 0..10_000 {
        let d = rng.random_range(1..=7);
        let key = path(&mut rng, d);
        let kc = components(&key);
        let mut want: Vec<&str> = regs
            .iter()
            .filter(|r| {
                let pc = components(&r.prefix);
                pc.len() <= kc.len() && pc[..] == kc[..pc.len()]
            })
            .map(|r| r.lambda_id.as_str())
            .collect();
        let got_regs = trie.matches(&key);
        let ordered = got_regs
            .windows(2)
            .all(|w| components(&w[0].prefix).len() <= components(&w[1].prefix).len());
        let mut got: Vec<&str> = got_regs.iter().map(|r| r.lambda_id.as_str()).collect();
        want.sort_unstable();
        got.sort_unstable();
        matched += got.len();
        if got != want || !ordered {
            mismatches += 1;
        }
    }
    let per_level = trie_per_level_ns(16);
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && per_level < 1000.0 && secs < 60.0,
        format!("10000 keys x 1000 registrations, {matched} matches, {mismatches} differ from the scan; {per_level:.0} ns per level; {secs:.1}s"),
    )
}

// 7
fn dispatch_policies() -> Outcome {
    let fp = FastPath::new(FastPathConfig {
        workers: 16,
        queue_bound: DEFAULT_QUEUE_BOUND,
    });
    let seen: Arc<parking_lot::Mutex<Vec<Vec<u64>>>> =
        Arc::new(parking_lot::Mutex::new(vec![Vec::new(); 64]));
    let s = Arc::clone(&seen);
    let rec = move |ev: &UpcallEvent| {
        let k: usize = ev.object.key().suffix()[1..].parse().unwrap();
        let seq = u64::from_le_bytes(ev.object.payload()[..8].try_into().unwrap());
        s.lock()[k].push(seq);
        Ok(())
    };
    fp.register(LambdaRegistration::new(
        "fifo",
        "/f",
        DispatchPolicy::FifoByKey,
        Arc::new(rec),
    ))
    .map_err(err)?;
    let keys: Vec<ObjectKey> = (0..64)
        .map(|k| ObjectKey::compose("/f", &format!("k{k}")).unwrap())
        .collect();
    let mut rng = StdRng::seed_from_u64(7);
    for seq in 0..100_000u64 {
        let k = rng.random_range(0..64);
        fp.dispatch(ObjectRef::triggered(
            keys[k].clone(),
            Bytes::copy_from_slice(&seq.to_le_bytes()),
        ));
    }
    if !fp.wait_idle(Duration::from_secs(60)) {
        return Err("fifo events never drained".into());
    }
    fp.shutdown();
    let seen = seen.lock();
    let total: usize = seen.iter().map(Vec::len).sum();
    let inversions: usize = seen
        .iter()
        .map(|v| v.windows(2).filter(|w| w[0] >= w[1]).count())
        .sum();

    let rr = FastPath::new(FastPathConfig {
        workers: 16,
        queue_bound: DEFAULT_QUEUE_BOUND,
    });
    rr.register(LambdaRegistration::new(
        "rr",
        "/r",
        DispatchPolicy::RoundRobin,
        Arc::new(|_: &UpcallEvent| Ok(())),
    ))
    .map_err(err)?;
    let k = 1000;
    let key = ObjectKey::compose("/r", "x").unwrap();
    for _ in 0..16 * k {
        rr.dispatch(ObjectRef::triggered(key.clone(), Bytes::from_static(b"x")));
    }
    rr.wait_idle(Duration::from_secs(60));
    let per_queue = rr.enqueued_per_queue();
    rr.shutdown();
    let even = per_queue.len() == 16 && per_queue.iter().all(|&n| n == k);
    check(
        total == 100_000 && inversions == 0 && even,
        format!("fifo: {total} events over 64 keys, {inversions} inversions; round robin: {per_queue:?} per queue"),
    )
}

// 8
fn latency_ordering() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let c = LocalCluster::start(two_pools(dir.path()), |_| LambdaRegistry::new()).map_err(err)?;
    let addr = c.node(1).addr();
    let mut med = BTreeMap::new();
    for op in [OpType::Trig, OpType::Vola, OpType::Pers] {
        let mut cfg = PutBenchConfig::new(op, 10 * 1024, 50.0, Duration::from_secs(4));
        cfg.skip_saturation_check = true;
        let r = run_put_bench(addr, &cfg).map_err(err)?;
        med.insert(op.as_str(), median_ns(&r));
    }
    c.shutdown();
    let (t, v, p) = (med["trig"], med["vola"], med["pers"]);
    let ratio = p as f64 / v as f64;
    check(
        t < v && v < p && ratio >= 2.0,
        format!("medians at 10 KB, 50 ops/s: trig {:.0} us, vola {:.0} us, pers {:.0} us; pers/vola {ratio:.1}", t as f64 / 1e3, v as f64 / 1e3, p as f64 / 1e3),
    )
}

// 9
fn pipeline_shape() -> Outcome {
    let mut lat: HashMap<(PutType, usize), u64> = HashMap::new();
    let mut tput: HashMap<(PutType, usize), f64> = HashMap::new();
    for edge in [PutType::Trigger, PutType::Volatile] {
        for k in 1..=4 {
            let cfg = PipelineBenchConfig {
                latency_ops: 300,
                throughput_ops: 2000,
                ..PipelineBenchConfig::new(k, edge)
            };
            let r = run_pipeline_bench(&cfg).map_err(err)?;
            lat.insert((edge, k), r.median_ns);
            tput.insert((edge, k), r.throughput);
        }
    }
    let mut ok = true;
    let mut lines = Vec::new();
    for edge in [PutType::Trigger, PutType::Volatile] {
        let l: Vec<u64> = (1..=4).map(|k| lat[&(edge, k)]).collect();
        let t: Vec<f64> = (2..=4).map(|k| tput[&(edge, k)]).collect();
        let monotone = l.windows(2).all(|w| w[0] < w[1]);
        let (lo, hi) = t
            .iter()
            .fold((f64::MAX, 0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let flat = (hi - lo) / hi <= 0.15;
        ok &= monotone && flat;
        lines.push(format!(
            "{edge:?}: median us {:?} (monotone {monotone}), ops/s k=2..4 {:?} (within 15% {flat})",
            l.iter().map(|x| x / 1000).collect::<Vec<_>>(),
            t.iter().map(|x| x.round() as u64).collect::<Vec<_>>()
        ));
    }
    let faster = (1..=4).all(|k| lat[&(PutType::Trigger, k)] < lat[&(PutType::Volatile, k)]);
    ok &= faster;
    lines.push(format!("trigger faster at every k: {faster}"));
    check(ok, lines.join("; "))
}

// 10
fn relay_pipeline(stages: usize) -> DfgDescriptor {
    let pools: Vec<String> = (1..=stages).map(|i| format!("/p{i}")).collect();
    let vertices: Vec<_> = (1..=stages)
        .map(|i| {
            let lambda = if i == stages { "sink" } else { "relay" };
            serde_json::json!({"id": format!("v{i}"), "lambda": lambda, "prefix": format!("/p{i}")})
        })
        .collect();
    let edges: Vec<_> = (1..stages)
        .map(|i| serde_json::json!({"from": format!("v{i}"), "to": format!("/p{}", i + 1), "put_type": "volatile"}))
        .collect();
    let json = serde_json::json!({"pools": pools, "vertices": vertices, "edges": edges});
    DfgDescriptor::parse(json.to_string().as_bytes()).unwrap()
}

fn pipeline_completeness() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut spec = ClusterSpec::new(3, dir.path()).dfg(relay_pipeline(4));
    for i in 1..=4 {
        spec = spec.pool(
            PoolDescriptor::new(&format!("/p{i}"), Persistence::Volatile).with_replication(3),
        );
    }
    let sunk = Arc::new(AtomicU64::new(0));
    let s = Arc::clone(&sunk);
    let c = LocalCluster::start(spec, move |_| {
        let s = Arc::clone(&s);
        LambdaRegistry::new().with("sink", move |_: &LambdaContext<'_>| {
            s.fetch_add(1, Ordering::Relaxed);
            Ok(())
        })
    })
    .map_err(err)?;
    let n = 10_000u64;
    let client = c.client().map_err(err)?;
    let mut pending = Vec::new();
    for i in 0..n {
        pending.push(
            client
                .put_async(
                    &format!("/p1/obj{i}"),
                    Bytes::from(i.to_le_bytes().to_vec()),
                )
                .map_err(err)?,
        );
    }
    for p in pending {
        p.wait().map_err(err)?;
    }
    let deadline = Instant::now() + Duration::from_secs(120);
    while sunk.load(Ordering::Relaxed) < n && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(20));
    }
    thread::sleep(Duration::from_millis(300));
    let got = sunk.load(Ordering::Relaxed);
    let failures: usize = c.nodes().map(|node| node.fastpath().failures().len()).sum();
    c.shutdown();
    check(
        got == n && failures == 0,
        format!("{n} injected, {got} stage-4 upcalls, {failures} lambda failures"),
    )
}

// 11
fn cms_ordering() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let spec = ClusterSpec::new(3, dir.path()).pool(
        PoolDescriptor::new("/cms/topics", Persistence::Volatile)
            .with_replication(3)
            .with_shards(2),
    );
    let c = LocalCluster::start(spec, |_| LambdaRegistry::new()).map_err(err)?;
    let client = c.client().map_err(err)?;
    let wait_subscribed = |topic: &str, n: usize| {
        for _ in 0..1000 {
            if c.nodes()
                .map(|node| node.cms().subscriber_count(topic))
                .sum::<usize>()
                == n
            {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
    };

    let n = 10_000usize;
    let subs: Vec<_> = (1..=3)
        .map(|node| client.subscribe_at(node, "T"))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    wait_subscribed("T", 3);
    let readers: Vec<_> = subs
        .into_iter()
        .map(|mut s| {
            thread::spawn(move || {
                let mut got = Vec::with_capacity(n);
                while got.len() < n {
                    match s.recv_timeout(Duration::from_secs(20)) {
                        Ok(m) => got.push(m.payload),
                        Err(_) => break,
                    }
                }
                got
            })
        })
        .collect();
    let pubs: Vec<_> = (0..2)
        .map(|w| {
            let client = client.clone();
            thread::spawn(move || -> Result<(), String> {
                for i in 0..n / 2 {
                    client
                        .publish("T", Persistence::Volatile, Bytes::from(format!("{w}:{i}")))
                        .map_err(err)?;
                }
                Ok(())
            })
        })
        .collect();
    for p in pubs {
        p.join().map_err(|_| "publisher panicked".to_string())??;
    }
    let seqs: Vec<Vec<Bytes>> = readers.into_iter().map(|r| r.join().unwrap()).collect();
    let identical = seqs.iter().all(|s| s.len() == n && *s == seqs[0]);
    let fifo = (0..2).all(|w| {
        let prefix = format!("{w}:");
        let mine: Vec<usize> = seqs[0]
            .iter()
            .filter_map(|p| {
                std::str::from_utf8(p)
                    .ok()?
                    .strip_prefix(&prefix)?
                    .parse()
                    .ok()
            })
            .collect();
        mine.len() == n / 2 && mine.windows(2).all(|w| w[0] < w[1])
    });

    // one slow and one fast consumer on different topics
    let m = 1000usize;
    let mut slow = client.subscribe("X").map_err(err)?;
    let mut fast = client.subscribe("Y").map_err(err)?;
    wait_subscribed("X", 1);
    wait_subscribed("Y", 1);
    let t0 = Instant::now();
    let slow_h = thread::spawn(move || {
        let mut got = Vec::new();
        while got.len() < m {
            let Ok(msg) = slow.recv_timeout(Duration::from_secs(20)) else {
                break;
            };
            got.push(msg.payload);
            thread::sleep(Duration::from_millis(5));
        }
        (got, t0.elapsed())
    });
    let fast_h = thread::spawn(move || {
        let mut got = Vec::new();
        while got.len() < m {
            let Ok(msg) = fast.recv_timeout(Duration::from_secs(20)) else {
                break;
            };
            got.push(msg.payload);
        }
        (got, t0.elapsed())
    });
    for i in 0..m {
        for topic in ["X", "Y"] {
            client
                .publish(topic, Persistence::Volatile, Bytes::from(i.to_string()))
                .map_err(err)?;
        }
    }
    let (xs, x_done) = slow_h.join().unwrap();
    let (ys, y_done) = fast_h.join().unwrap();
    c.shutdown();
    let in_order = |v: &[Bytes]| {
        v.len() == m
            && v.iter()
                .enumerate()
                .all(|(i, p)| p[..] == *i.to_string().as_bytes())
    };
    let decoupled = in_order(&xs) && in_order(&ys) && y_done * 2 < x_done;
    check(
        identical && fifo && decoupled,
        format!(
            "3 subscribers saw {} identical of {n}, per-publisher order kept: {fifo}; fast topic done in {:.2}s, slow topic in {:.2}s",
            seqs.iter().filter(|s| **s == seqs[0]).count(),
            y_done.as_secs_f64(),
            x_done.as_secs_f64()
        ),
    )
}

// 12
fn single_allocation() -> Outcome {
    const SIZE: usize = 1 << 20;
    let dir = tempfile::tempdir().map_err(err)?;
    let spec = ClusterSpec::new(1, dir.path())
        .pool(PoolDescriptor::new("/t", Persistence::Volatile).with_replication(1));
    let c = LocalCluster::start(spec, |_| LambdaRegistry::new()).map_err(err)?;
    let node = c.node(1);
    let seen = Arc::new(parking_lot::Mutex::new(Vec::new()));
    for (i, prefix) in ["/t", "/t/x", "/t/x/y"].into_iter().enumerate() {
        let s = Arc::clone(&seen);
        let probe = move |ev: &UpcallEvent| {
            s.lock().push(ev.object.payload().as_ptr() as usize);
            Ok(())
        };
        node.fastpath()
            .register(LambdaRegistration::new(
                &format!("l{i}"),
                prefix,
                DispatchPolicy::RoundRobin,
                Arc::new(probe),
            ))
            .map_err(err)?;
    }
    let frame = Request::TriggerPut {
        corr: 1,
        key: "/t/x/y/obj".into(),
        payload: Bytes::from(vec![7u8; SIZE]),
    }
    .encode();
    let mut stream = TcpStream::connect(node.addr()).map_err(err)?;
    stream.write_all(&CLIENT_MAGIC).map_err(err)?;
    THRESHOLD.store(SIZE, Ordering::SeqCst);
    LARGE.store(0, Ordering::SeqCst);
    ARMED.store(true, Ordering::SeqCst);
    stream.write_all(&frame).map_err(err)?;
    let deadline = Instant::now() + Duration::from_secs(10);
    while seen.lock().len() < 3 && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(2));
    }
    node.fastpath().wait_idle(Duration::from_secs(5));
    ARMED.store(false, Ordering::SeqCst);
    let large = LARGE.load(Ordering::SeqCst);
    let ptrs = seen.lock().clone();
    drop(stream);
    c.shutdown();
    let shared = ptrs.len() == 3 && ptrs.iter().all(|&p| p == ptrs[0]);
    check(
        large == 1 && shared,
        format!("{} upcalls from one 1 MiB trigger put, {large} payload-sized allocations, all upcalls share one buffer: {shared}", ptrs.len()),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    ("torn-read freedom", torn_reads),
    ("replication agreement", agreement),
    ("durability under crashes", durability),
    ("temporal get oracle", temporal_oracle),
    ("future-window delay", future_window),
    ("trie equivalence and cost", trie_equivalence),
    ("dispatch policies", dispatch_policies),
    ("put latency ordering", latency_ordering),
    ("pipeline shape", pipeline_shape),
    ("pipeline completeness", pipeline_completeness),
    ("cms ordering", cms_ordering),
    ("single payload allocation", single_allocation),
];

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "{tag} {n:>2} {name} ({secs:.1}s): {detail}");
        let _ = out.flush();
    }
    let _ = writeln!(out, "{failed} criteria failed");
    let strict = std::env::var("KVFLOW_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
