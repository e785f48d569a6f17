//! One shard as seen by one of its members: ordered delivery into the
//! local store and log, and, on the sequencer, ordering and commit tracking.
//!
//! The live member with the lowest id sequences every put: it stamps the
//! next `shard_seq` and a strictly increasing timestamp, then sends an MCAST
//! to each live member (itself included, through a local channel). Every
//! member applies MCASTs strictly in sequence order on its delivery thread,
//! acks cumulatively, and hands each new object to its fast path. A volatile
//! put commits once every live member acked application; a persistent put
//! additionally waits for every live member's durable ack.
//!
//! When the sequencer fails, the next-lowest live member asks the others for
//! anything it missed (GAP_REQ), applies it, and only then resumes
//! sequencing after the highest sequence number any survivor has seen.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{unbounded, Receiver, Sender};
use kvflow_core::fastpath::{FastPath, ObjectRef};
use kvflow_core::log::{LogConfig, PersistentLog};
use kvflow_core::model::now_us;
use kvflow_core::shard::{KvShard, ShardWriter};
use kvflow_core::{stable_hash, Error, ObjectKey, Persistence, PoolDescriptor, Result, Version};
use parking_lot::Mutex;

use crate::view::Membership;
use crate::wire::{Mcast, PeerMsg, ServerTiming, ShardId};

/// Retransmit buffer length. Senders keep only a few puts in flight, so
/// anything a survivor can still be missing is recent.
const RETRANSMIT_DEPTH: usize = 4096;

/// How the replica reaches other nodes.
pub trait Transport: Send + Sync {
    /// Queues a frame for `to`. Delivery failures surface as failure
    /// detection, not here.
    fn send(&self, to: u32, frame: Bytes);
}

/// Result of a committed put.
#[derive(Clone, Copy, Debug)]
pub struct Commit {
    pub version: Version,
    /// Timing as seen by the sequencer; `residence_ns` is filled in by the
    /// caller when it replies.
    pub timing: ServerTiming,
}

pub type CommitCallback = Box<dyn FnOnce(Result<Commit>) + Send>;

struct PendingCommit {
    t_recv: Instant,
    t_seq: Instant,
    version: Option<Version>,
    processing_ns: u64,
    t_applied: Option<Instant>,
    done: CommitCallback,
}

#[derive(Default)]
struct SeqState {
    ready: bool,
    was_sequencer: bool,
    next: u64,
    last_ts: u64,
    hello: HashMap<u32, (u64, u64)>,
    takeover: Option<Takeover>,
}

struct Takeover {
    waiting: HashSet<u32>,
    max_seen: u64,
}

#[derive(Default)]
struct AckState {
    applied: HashMap<u32, u64>,
    persisted: HashMap<u32, u64>,
    pending: BTreeMap<u64, PendingCommit>,
}

enum Delivery {
    Mcast(Mcast),
    /// Runs after everything queued before it has been applied.
    Barrier(Box<dyn FnOnce(u64, u64) + Send>),
    Stop,
}

pub struct ReplicaOptions {
    pub log_flush_interval: Duration,
    pub log_sync_delay: Duration,
    pub trace: bool,
}

pub struct ShardReplica {
    pub id: ShardId,
    pool: PoolDescriptor,
    me: u32,
    store: Arc<KvShard>,
    log: Option<Arc<PersistentLog>>,
    view: Arc<Membership>,
    net: Arc<dyn Transport>,
    fastpath: Arc<FastPath>,
    deliver_tx: Sender<Delivery>,
    seq: Mutex<SeqState>,
    acks: Mutex<AckState>,
    retransmit: Mutex<VecDeque<Mcast>>,
    delivered: AtomicU64,
    stopped: AtomicBool,
    trace: Option<Mutex<Vec<(u64, u64)>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

fn log_file_name(id: &ShardId) -> String {
    format!(
        "{}-shard{}.log",
        id.pool.trim_start_matches('/').replace('/', "_"),
        id.shard
    )
}

impl ShardReplica {
    /// Opens the shard, replaying its log into the store for persistent
    /// pools, and starts the delivery thread.
    pub fn open(
        id: ShardId,
        pool: PoolDescriptor,
        view: Arc<Membership>,
        net: Arc<dyn Transport>,
        fastpath: Arc<FastPath>,
        log_dir: &Path,
        opts: &ReplicaOptions,
    ) -> Result<Arc<Self>> {
        let me = view.me();
        let store = KvShard::new(pool.persistence);
        let mut writer = store.writer();
        let mut last = (0, 0);
        let log = if pool.persistence == Persistence::Persistent {
            std::fs::create_dir_all(log_dir)?;
            let mut cfg = LogConfig::new(log_dir.join(log_file_name(&id)));
            cfg.flush_interval = opts.log_flush_interval;
            cfg.sync_delay = opts.log_sync_delay;
            let (log, recovery) = PersistentLog::open(cfg)?;
            for rec in &recovery.records {
                let key = rec.object_key(&pool.path)?;
                writer.apply_put(
                    rec.payload.clone(),
                    key,
                    rec.version.shard_seq,
                    rec.version.timestamp_us,
                );
                last = (rec.version.shard_seq, rec.version.timestamp_us);
            }
            if !recovery.records.is_empty() {
                log::info!(
                    "{id}: recovered {} records up to seq {}",
                    recovery.records.len(),
                    last.0
                );
            }
            Some(log)
        } else {
            None
        };

        let (deliver_tx, deliver_rx) = unbounded();
        let mut acks = AckState::default();
        acks.applied.insert(me, last.0);
        acks.persisted.insert(me, last.0);
        let mut seq = SeqState::default();
        seq.hello.insert(me, last);
        let replica = Arc::new(ShardReplica {
            id,
            pool,
            me,
            store,
            log,
            view,
            net,
            fastpath,
            deliver_tx,
            seq: Mutex::new(seq),
            acks: Mutex::new(acks),
            retransmit: Mutex::new(VecDeque::new()),
            delivered: AtomicU64::new(last.0),
            stopped: AtomicBool::new(false),
            trace: opts.trace.then(|| Mutex::new(Vec::new())),
            threads: Mutex::new(Vec::new()),
        });

        let r = Arc::clone(&replica);
        let name = format!("deliver-{}", replica.id);
        let h = thread::Builder::new()
            .name(name)
            .spawn(move || r.delivery_loop(writer, deliver_rx, last.1))?;
        replica.threads.lock().push(h);
        if let Some(log) = &replica.log {
            let durable = log.subscribe_durable();
            let r = Arc::clone(&replica);
            let h = thread::Builder::new()
                .name(format!("durable-{}", replica.id))
                .spawn(move || r.durable_loop(durable))?;
            replica.threads.lock().push(h);
        }
        Ok(replica)
    }

    pub fn pool(&self) -> &PoolDescriptor {
        &self.pool
    }

    pub fn store(&self) -> &Arc<KvShard> {
        &self.store
    }

    pub fn log(&self) -> Option<&Arc<PersistentLog>> {
        self.log.as_ref()
    }

    /// Highest sequence number applied locally.
    pub fn delivered_seq(&self) -> u64 {
        self.delivered.load(Ordering::Acquire)
    }

    /// Delivery order as (shard_seq, key hash), when tracing is enabled.
    pub fn trace(&self) -> Vec<(u64, u64)> {
        self.trace
            .as_ref()
            .map(|t| t.lock().clone())
            .unwrap_or_default()
    }

    pub fn is_ready(&self) -> bool {
        self.seq.lock().ready
    }

    /// This node's last sequence number and timestamp, for HELLO.
    pub fn hello_state(&self) -> (u64, u64) {
        self.seq.lock().hello[&self.me]
    }

    fn peers(&self) -> impl Iterator<Item = u32> + '_ {
        self.view
            .live_members(&self.id)
            .into_iter()
            .filter(move |m| *m != self.me)
    }

    /// Sequences a put. Only valid on the shard's sequencer. `done` runs
    /// once the put commits or fails.
    pub fn submit(
        &self,
        key: ObjectKey,
        payload: Bytes,
        t_recv: Instant,
        done: CommitCallback,
    ) -> Result<()> {
        let mut st = self.seq.lock();
        let sequencer = self.view.sequencer(&self.id);
        if sequencer != Some(self.me) {
            return Err(Error::NotSequencer(sequencer.unwrap_or(0)));
        }
        if !st.ready {
            return Err(Error::ShardUnavailable(format!(
                "{} is not ready to sequence",
                self.id
            )));
        }
        let seq = st.next;
        st.next += 1;
        let ts = now_us().max(st.last_ts + 1);
        st.last_ts = ts;
        let t_seq = Instant::now();
        self.acks.lock().pending.insert(
            seq,
            PendingCommit {
                t_recv,
                t_seq,
                version: None,
                processing_ns: 0,
                t_applied: None,
                done,
            },
        );
        let m = Mcast {
            shard: self.id.clone(),
            seq,
            ts,
            sender: self.me,
            key: key.full(),
            payload,
        };
        let peers: Vec<u32> = self.peers().collect();
        if !peers.is_empty() {
            let frame = PeerMsg::Mcast(m.clone()).encode();
            for p in peers {
                self.net.send(p, frame.clone());
            }
        }
        let _ = self.deliver_tx.send(Delivery::Mcast(m));
        Ok(())
    }

    /// Incoming MCAST, from the sequencer or a retransmission.
    pub fn on_mcast(&self, m: Mcast) {
        let _ = self.deliver_tx.send(Delivery::Mcast(m));
    }

    fn delivery_loop(
        self: Arc<Self>,
        mut writer: ShardWriter,
        rx: Receiver<Delivery>,
        mut last_ts: u64,
    ) {
        let mut out_of_order: BTreeMap<u64, Mcast> = BTreeMap::new();
        let mut gap_asked: Option<(u64, Instant)> = None;
        let mut ack_to: HashMap<u32, u64> = HashMap::new();
        while let Ok(first) = rx.recv() {
            let mut next = Some(first);
            while let Some(d) = next.take() {
                match d {
                    Delivery::Stop => return,
                    Delivery::Barrier(f) => {
                        self.flush_acks(&mut ack_to);
                        f(self.delivered_seq(), last_ts);
                    }
                    Delivery::Mcast(m) => {
                        if m.seq > self.delivered_seq() {
                            out_of_order.insert(m.seq, m);
                        }
                        while let Some(m) = out_of_order.remove(&(self.delivered_seq() + 1)) {
                            last_ts = last_ts.max(m.ts);
                            let sender = m.sender;
                            let seq = m.seq;
                            self.apply(&mut writer, m);
                            let e = ack_to.entry(sender).or_default();
                            *e = (*e).max(seq);
                        }
                    }
                }
                next = rx.try_recv().ok();
            }
            self.flush_acks(&mut ack_to);
            if let Some((&first_missing_after, _)) = out_of_order.iter().next() {
                let want = self.delivered_seq() + 1;
                let stale = gap_asked
                    .is_none_or(|(s, at)| s != want || at.elapsed() > Duration::from_millis(200));
                if stale {
                    if let Some(seqr) = self.view.sequencer(&self.id).filter(|s| *s != self.me) {
                        log::debug!(
                            "{}: gap before {first_missing_after}, asking {seqr} from {want}",
                            self.id
                        );
                        self.net.send(
                            seqr,
                            PeerMsg::GapReq {
                                shard: self.id.clone(),
                                from: self.me,
                                from_seq: want,
                            }
                            .encode(),
                        );
                        gap_asked = Some((want, Instant::now()));
                    }
                }
            }
        }
    }

    fn apply(&self, writer: &mut ShardWriter, m: Mcast) {
        let t0 = Instant::now();
        let key = match ObjectKey::compose(
            &self.pool.path,
            m.key
                .strip_prefix(&self.pool.path)
                .unwrap_or(&m.key)
                .trim_start_matches('/'),
        ) {
            Ok(k) => k,
            Err(e) => {
                // the sequencer validated the key; this is a protocol bug
                log::error!(
                    "{}: dropping seq {} with bad key {:?}: {e}",
                    self.id,
                    m.seq,
                    m.key
                );
                return;
            }
        };
        let obj = writer.apply_put(m.payload.clone(), key, m.seq, m.ts);
        if let Some(log) = &self.log {
            if let Err(e) = log.append(&obj.key, obj.payload.clone(), obj.version) {
                log::error!("{}: log append failed at seq {}: {e}", self.id, m.seq);
            }
        }
        let processing_ns = t0.elapsed().as_nanos() as u64;
        self.delivered.store(m.seq, Ordering::Release);
        if let Some(t) = &self.trace {
            t.lock()
                .push((m.seq, stable_hash(m.key.as_bytes()).value()));
        }
        if m.sender == self.me {
            if let Some(p) = self.acks.lock().pending.get_mut(&m.seq) {
                p.version = Some(obj.version);
                p.processing_ns = processing_ns;
            }
        }
        {
            let mut rt = self.retransmit.lock();
            if rt.len() == RETRANSMIT_DEPTH {
                rt.pop_front();
            }
            rt.push_back(m);
        }
        self.fastpath.submit(ObjectRef::Stored(obj));
    }

    fn flush_acks(&self, ack_to: &mut HashMap<u32, u64>) {
        for (sender, seq) in ack_to.drain() {
            if sender == self.me {
                self.on_mcast_ack(self.me, seq);
            } else {
                self.net.send(
                    sender,
                    PeerMsg::McastAck {
                        shard: self.id.clone(),
                        from: self.me,
                        seq,
                    }
                    .encode(),
                );
            }
        }
    }

    fn durable_loop(self: Arc<Self>, durable: Receiver<u64>) {
        while !self.stopped.load(Ordering::Acquire) {
            let Ok(mut seq) = durable.recv_timeout(Duration::from_millis(50)) else {
                continue;
            };
            while let Ok(s) = durable.try_recv() {
                seq = seq.max(s);
            }
            let frame = PeerMsg::PersistAck {
                shard: self.id.clone(),
                from: self.me,
                seq,
            }
            .encode();
            for p in self.peers() {
                self.net.send(p, frame.clone());
            }
            self.on_persist_ack(self.me, seq);
        }
    }

    pub fn on_mcast_ack(&self, from: u32, seq: u64) {
        let done = {
            let mut a = self.acks.lock();
            let e = a.applied.entry(from).or_default();
            *e = (*e).max(seq);
            self.collect_completions(&mut a)
        };
        Self::complete(done);
    }

    pub fn on_persist_ack(&self, from: u32, seq: u64) {
        let done = {
            let mut a = self.acks.lock();
            let e = a.persisted.entry(from).or_default();
            *e = (*e).max(seq);
            self.update_frontier(&a);
            self.collect_completions(&mut a)
        };
        Self::complete(done);
    }

    fn update_frontier(&self, a: &AckState) {
        if let Some(log) = &self.log {
            let acked: Vec<Option<u64>> = self
                .view
                .live_members(&self.id)
                .iter()
                .map(|m| a.persisted.get(m).copied())
                .collect();
            log.advance_frontier(&acked);
        }
    }

    fn collect_completions(&self, a: &mut AckState) -> Vec<(PendingCommit, Result<Commit>)> {
        if a.pending.is_empty() {
            return Vec::new();
        }
        let live = self.view.live_members(&self.id);
        let min_of = |m: &HashMap<u32, u64>| {
            live.iter()
                .map(|id| m.get(id).copied().unwrap_or(0))
                .min()
                .unwrap_or(0)
        };
        let applied = min_of(&a.applied);
        let persisted = min_of(&a.persisted);
        let now = Instant::now();
        for (_, p) in a.pending.range_mut(..=applied) {
            p.t_applied.get_or_insert(now);
        }
        let committed = if self.pool.persistence == Persistence::Persistent {
            applied.min(persisted)
        } else {
            applied
        };
        let rest = a.pending.split_off(&(committed + 1));
        let done = std::mem::replace(&mut a.pending, rest);
        done.into_values()
            .map(|p| {
                let t_applied = p.t_applied.unwrap_or(now);
                let version = p.version.unwrap_or_default();
                let timing = ServerTiming {
                    residence_ns: 0,
                    queue_ns: (p.t_seq - p.t_recv).as_nanos() as u64,
                    multicast_ns: ((t_applied - p.t_seq).as_nanos() as u64)
                        .saturating_sub(p.processing_ns),
                    processing_ns: p.processing_ns,
                    persistence_ns: match self.pool.persistence {
                        Persistence::Persistent => (now - t_applied).as_nanos() as u64,
                        Persistence::Volatile => 0,
                    },
                };
                (p, Ok(Commit { version, timing }))
            })
            .collect()
    }

    fn complete(done: Vec<(PendingCommit, Result<Commit>)>) {
        for (p, r) in done {
            (p.done)(r);
        }
    }

    /// Fails puts that have waited longer than `timeout`, naming the live
    /// member furthest behind.
    pub fn expire(&self, timeout: Duration) {
        let expired: Vec<PendingCommit> = {
            let mut a = self.acks.lock();
            let now = Instant::now();
            let stale: Vec<u64> = a
                .pending
                .iter()
                .filter(|(_, p)| now - p.t_recv > timeout)
                .map(|(s, _)| *s)
                .collect();
            stale
                .into_iter()
                .filter_map(|s| a.pending.remove(&s))
                .collect()
        };
        if expired.is_empty() {
            return;
        }
        let laggard = {
            let a = self.acks.lock();
            let field = if self.pool.persistence == Persistence::Persistent {
                &a.persisted
            } else {
                &a.applied
            };
            self.view
                .live_members(&self.id)
                .into_iter()
                .min_by_key(|m| field.get(m).copied().unwrap_or(0))
                .unwrap_or(0)
        };
        for p in expired {
            (p.done)(Err(Error::CommitTimeout(laggard)));
        }
    }

    /// HELLO from a member during bootstrap.
    pub fn on_hello(self: &Arc<Self>, from: u32, last_seq: u64, last_ts: u64) {
        if self.pool.persistence == Persistence::Persistent {
            self.on_persist_ack(from, last_seq);
        }
        let mut st = self.seq.lock();
        st.hello.insert(from, (last_seq, last_ts));
        let members = self.view.live_members(&self.id);
        if self.view.sequencer(&self.id) == Some(self.me)
            && !st.ready
            && st.takeover.is_none()
            && members.iter().all(|m| st.hello.contains_key(m))
        {
            let (seq, ts) = members
                .iter()
                .map(|m| st.hello[m])
                .fold((0, 0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
            st.next = seq + 1;
            st.last_ts = ts;
            st.ready = true;
            st.was_sequencer = true;
            log::info!(
                "{}: node {} sequencing from seq {}",
                self.id,
                self.me,
                st.next
            );
        }
    }

    /// A member of this shard has failed.
    pub fn on_view_change(self: &Arc<Self>) {
        let done = {
            let mut a = self.acks.lock();
            self.update_frontier(&a);
            self.collect_completions(&mut a)
        };
        Self::complete(done);

        let live: HashSet<u32> = self.view.live_members(&self.id).into_iter().collect();
        let mut st = self.seq.lock();
        if let Some(t) = &mut st.takeover {
            t.waiting.retain(|m| live.contains(m));
        }
        let is_seq = self.view.sequencer(&self.id) == Some(self.me);
        if is_seq && !st.was_sequencer {
            st.was_sequencer = true;
            st.ready = false;
            let waiting: HashSet<u32> = live.iter().copied().filter(|m| *m != self.me).collect();
            let from_seq = self.delivered_seq() + 1;
            log::info!(
                "{}: node {} taking over sequencing, syncing from seq {from_seq}",
                self.id,
                self.me
            );
            for m in &waiting {
                self.net.send(
                    *m,
                    PeerMsg::GapReq {
                        shard: self.id.clone(),
                        from: self.me,
                        from_seq,
                    }
                    .encode(),
                );
            }
            st.takeover = Some(Takeover {
                waiting,
                max_seen: self.delivered_seq(),
            });
        }
        self.maybe_finish_takeover(&mut st);
    }

    /// Replays retained updates from `from_seq` to `to`, then marks the end.
    pub fn on_gap_req(&self, to: u32, from_seq: u64) {
        let frames: Vec<Bytes> = self
            .retransmit
            .lock()
            .iter()
            .filter(|m| m.seq >= from_seq)
            .map(|m| PeerMsg::Mcast(m.clone()).encode())
            .collect();
        for f in frames {
            self.net.send(to, f);
        }
        let last_seq = self.delivered_seq();
        self.net.send(
            to,
            PeerMsg::GapEnd {
                shard: self.id.clone(),
                from: self.me,
                last_seq,
            }
            .encode(),
        );
    }

    pub fn on_gap_end(self: &Arc<Self>, from: u32, last_seq: u64) {
        let mut st = self.seq.lock();
        if let Some(t) = &mut st.takeover {
            t.waiting.remove(&from);
            t.max_seen = t.max_seen.max(last_seq);
        }
        self.maybe_finish_takeover(&mut st);
    }

    fn maybe_finish_takeover(self: &Arc<Self>, st: &mut SeqState) {
        let Some(t) = &st.takeover else { return };
        if !t.waiting.is_empty() {
            return;
        }
        let max_seen = t.max_seen;
        st.takeover = None;
        // the retransmissions were queued ahead of this barrier
        let r = Arc::clone(self);
        let _ = self
            .deliver_tx
            .send(Delivery::Barrier(Box::new(move |delivered, last_ts| {
                let mut st = r.seq.lock();
                if delivered < max_seen {
                    log::warn!(
                        "{}: takeover could only recover up to seq {delivered} of {max_seen}",
                        r.id
                    );
                }
                st.next = delivered.max(max_seen) + 1;
                st.last_ts = st.last_ts.max(last_ts);
                st.ready = true;
                log::info!("{}: node {} sequencing from seq {}", r.id, r.me, st.next);
            })));
    }

    /// Stops background threads. With `crash`, staged log records are
    /// discarded as they would be by a power loss.
    pub fn stop(&self, crash: bool) {
        if self.stopped.swap(true, Ordering::AcqRel) {
            return;
        }
        let _ = self.deliver_tx.send(Delivery::Stop);
        if let Some(log) = &self.log {
            if crash {
                log.abandon();
            } else {
                log.close();
            }
        }
        let pending: Vec<PendingCommit> = std::mem::take(&mut self.acks.lock().pending)
            .into_values()
            .collect();
        for p in pending {
            (p.done)(Err(Error::ShardUnavailable(format!("{} stopped", self.id))));
        }
        let handles: Vec<_> = self.threads.lock().drain(..).collect();
        for h in handles {
            if h.thread().id() != thread::current().id() {
                let _ = h.join();
            }
        }
    }
}
