//! The per-node dispatch engine.
//!
//! A single dispatcher context matches each arriving object's key against a
//! [`PrefixTrie`] and, for each matching registration, pushes an
//! [`UpcallEvent`] onto one worker's bounded queue. Events hold shared
//! references to the object and the registration; the payload is never
//! copied. Each worker owns one queue and runs its events in order.
//!
//! Queue choice: `RoundRobin` cycles through queues per registration;
//! `FifoByKey` uses `stable_hash(full key) % workers`, so objects with the
//! same key are upcalled in arrival order on one worker.
//!
//! Two alternatives are deliberately not offered: running lambdas inline on
//! the delivery context (a slow lambda would stall delivery), and spawning a
//! thread per event.

mod trie;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use bytes::Bytes;
use crossbeam_channel::{bounded, unbounded, Receiver, Sender, TrySendError};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

pub use trie::PrefixTrie;

use crate::error::{Error, Result};
use crate::hash::stable_hash;
use crate::model::{validate_path, ObjectKey, Version};
use crate::shard::VersionedObject;

pub const DEFAULT_QUEUE_BOUND: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchPolicy {
    #[default]
    RoundRobin,
    FifoByKey,
}

/// Something the fast path can upcall.
pub trait Upcall: Send + Sync {
    fn upcall(&self, event: &UpcallEvent) -> std::result::Result<(), String>;
}

impl<F> Upcall for F
where
    F: Fn(&UpcallEvent) -> std::result::Result<(), String> + Send + Sync,
{
    fn upcall(&self, event: &UpcallEvent) -> std::result::Result<(), String> {
        self(event)
    }
}

pub struct LambdaRegistration {
    pub lambda_id: String,
    pub prefix: String,
    pub policy: DispatchPolicy,
    handler: Arc<dyn Upcall>,
    cursor: AtomicUsize,
}

impl LambdaRegistration {
    pub fn new(
        lambda_id: &str,
        prefix: &str,
        policy: DispatchPolicy,
        handler: Arc<dyn Upcall>,
    ) -> Self {
        LambdaRegistration {
            lambda_id: lambda_id.to_string(),
            prefix: prefix.to_string(),
            policy,
            handler,
            cursor: AtomicUsize::new(0),
        }
    }
}

impl std::fmt::Debug for LambdaRegistration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LambdaRegistration")
            .field("lambda_id", &self.lambda_id)
            .field("prefix", &self.prefix)
            .field("policy", &self.policy)
            .finish()
    }
}

/// A payload delivered by trigger put: never stored, never versioned.
#[derive(Debug)]
pub struct TriggeredObject {
    pub key: ObjectKey,
    pub payload: Bytes,
}

/// Shared reference to a dispatched object.
#[derive(Clone, Debug)]
pub enum ObjectRef {
    Stored(Arc<VersionedObject>),
    Triggered(Arc<TriggeredObject>),
}

impl ObjectRef {
    pub fn triggered(key: ObjectKey, payload: Bytes) -> Self {
        ObjectRef::Triggered(Arc::new(TriggeredObject { key, payload }))
    }

    pub fn key(&self) -> &ObjectKey {
        match self {
            ObjectRef::Stored(o) => &o.key,
            ObjectRef::Triggered(o) => &o.key,
        }
    }

    pub fn payload(&self) -> &Bytes {
        match self {
            ObjectRef::Stored(o) => &o.payload,
            ObjectRef::Triggered(o) => &o.payload,
        }
    }

    pub fn version(&self) -> Option<Version> {
        match self {
            ObjectRef::Stored(o) => Some(o.version),
            ObjectRef::Triggered(_) => None,
        }
    }
}

pub struct UpcallEvent {
    pub object: ObjectRef,
    pub registration: Arc<LambdaRegistration>,
    /// When the dispatcher received the object.
    pub arrived_at: Instant,
    /// When the event was placed on its queue.
    pub enqueued_at: Instant,
    /// Set by the worker when it takes the event.
    pub dequeued_at: Instant,
    pub queue: usize,
}

#[derive(Clone, Debug)]
pub struct LambdaFailure {
    pub lambda_id: String,
    pub key: String,
    pub queue: usize,
    pub message: String,
}

#[derive(Clone, Copy, Debug)]
pub struct FastPathConfig {
    pub workers: usize,
    pub queue_bound: usize,
}

impl Default for FastPathConfig {
    fn default() -> Self {
        let parallelism = thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(2);
        FastPathConfig {
            workers: parallelism.max(2),
            queue_bound: DEFAULT_QUEUE_BOUND,
        }
    }
}

impl FastPathConfig {
    pub fn with_workers(workers: usize) -> Self {
        FastPathConfig {
            workers,
            ..Self::default()
        }
    }
}

#[derive(Default)]
struct Progress {
    dispatched: AtomicU64,
    completed: AtomicU64,
    /// Objects submitted but not yet through [`FastPath::dispatch`].
    unrouted: AtomicU64,
    idle_lock: Mutex<()>,
    idle_cv: Condvar,
}

pub struct FastPath {
    trie: ArcSwap<PrefixTrie>,
    register_lock: Mutex<()>,
    queues: Vec<Sender<UpcallEvent>>,
    enqueued: Vec<AtomicU64>,
    queue_bound: usize,
    workers: Mutex<Vec<JoinHandle<()>>>,
    failures: Arc<Mutex<Vec<LambdaFailure>>>,
    progress: Arc<Progress>,
    dropped_unmatched: AtomicU64,
    input: Sender<Option<ObjectRef>>,
    dispatcher: Mutex<Option<JoinHandle<()>>>,
}

impl FastPath {
    pub fn new(config: FastPathConfig) -> Arc<Self> {
        let n = config.workers.max(1);
        let failures = Arc::new(Mutex::new(Vec::new()));
        let progress = Arc::new(Progress::default());
        let mut queues = Vec::with_capacity(n);
        let mut workers = Vec::with_capacity(n);
        for idx in 0..n {
            let (tx, rx) = bounded(config.queue_bound);
            queues.push(tx);
            let failures = Arc::clone(&failures);
            let progress = Arc::clone(&progress);
            let h = thread::Builder::new()
                .name(format!("upcall-{idx}"))
                .spawn(move || worker_loop(rx, failures, progress))
                .expect("spawn upcall worker");
            workers.push(h);
        }
        let (input, input_rx) = unbounded::<Option<ObjectRef>>();
        Arc::new_cyclic(|weak: &std::sync::Weak<FastPath>| {
            let weak = weak.clone();
            let dispatcher = thread::Builder::new()
                .name("dispatcher".into())
                .spawn(move || {
                    while let Ok(Some(obj)) = input_rx.recv() {
                        let Some(fp) = weak.upgrade() else { break };
                        fp.dispatch(obj);
                        fp.progress.unrouted.fetch_sub(1, Ordering::AcqRel);
                        let _g = fp.progress.idle_lock.lock();
                        fp.progress.idle_cv.notify_all();
                    }
                })
                .expect("spawn dispatcher");
            FastPath {
                trie: ArcSwap::from_pointee(PrefixTrie::new()),
                register_lock: Mutex::new(()),
                enqueued: (0..n).map(|_| AtomicU64::new(0)).collect(),
                queues,
                queue_bound: config.queue_bound,
                workers: Mutex::new(workers),
                failures,
                progress,
                dropped_unmatched: AtomicU64::new(0),
                input,
                dispatcher: Mutex::new(Some(dispatcher)),
            }
        })
    }

    pub fn worker_count(&self) -> usize {
        self.queues.len()
    }

    /// Adds a registration; visible to the next dispatch.
    pub fn register(&self, reg: LambdaRegistration) -> Result<Arc<LambdaRegistration>> {
        validate_path(&reg.prefix).map_err(|r| Error::MalformedKey {
            key: reg.prefix.clone(),
            reason: r,
        })?;
        let _g = self.register_lock.lock();
        let current = self.trie.load();
        if current.contains(&reg.lambda_id, &reg.prefix) {
            return Err(Error::DuplicateRegistration {
                lambda: reg.lambda_id,
                prefix: reg.prefix,
            });
        }
        let reg = Arc::new(reg);
        let mut next = PrefixTrie::clone(&current);
        next.insert(Arc::clone(&reg));
        self.trie.store(Arc::new(next));
        Ok(reg)
    }

    pub fn registrations(&self) -> Vec<Arc<LambdaRegistration>> {
        self.trie.load().registrations()
    }

    /// Registrations whose prefix is a path-prefix of `key`, shortest first.
    pub fn match_key(&self, full_key: &str) -> Vec<Arc<LambdaRegistration>> {
        self.trie.load().matches(full_key)
    }

    pub fn trie(&self) -> Arc<PrefixTrie> {
        self.trie.load_full()
    }

    fn queue_for(&self, reg: &LambdaRegistration, full_key: &str) -> usize {
        let n = self.queues.len();
        match reg.policy {
            DispatchPolicy::RoundRobin => reg.cursor.fetch_add(1, Ordering::Relaxed) % n,
            DispatchPolicy::FifoByKey => {
                (stable_hash(full_key.as_bytes()).value() % n as u64) as usize
            }
        }
    }

    /// Hands `object` to the dispatcher thread without blocking.
    ///
    /// Delivery threads and lambdas use this: a full worker queue stalls only
    /// the dispatcher, never the caller. Otherwise a lambda blocked on a put
    /// whose commit needs this node's delivery thread could wait on itself.
    /// Arrival order is kept per submitting thread.
    pub fn submit(&self, object: ObjectRef) {
        self.progress.unrouted.fetch_add(1, Ordering::AcqRel);
        if self.input.send(Some(object)).is_err() {
            self.progress.unrouted.fetch_sub(1, Ordering::AcqRel);
        }
    }

    /// Enqueues one event per matching registration on the calling thread,
    /// blocking while a target queue is full. Returns the number of events
    /// enqueued.
    pub fn dispatch(&self, object: ObjectRef) -> usize {
        let arrived_at = Instant::now();
        let full = object.key().full();
        let trie = self.trie.load();
        let mut n = 0;
        trie.for_each_match(&full, |reg| {
            let queue = self.queue_for(reg, &full);
            self.push(queue, &object, reg, arrived_at);
            n += 1;
        });
        if n == 0 {
            self.dropped_unmatched.fetch_add(1, Ordering::Relaxed);
        }
        n
    }

    /// Like [`FastPath::dispatch`] but fails with [`Error::QueueFull`]
    /// instead of blocking. Nothing is enqueued on failure.
    pub fn try_dispatch(&self, object: ObjectRef) -> Result<usize> {
        let arrived_at = Instant::now();
        let full = object.key().full();
        let trie = self.trie.load();
        let regs = trie.matches(&full);
        let mut plan = Vec::with_capacity(regs.len());
        let mut need = vec![0usize; self.queues.len()];
        for reg in &regs {
            // a registration sits at exactly one trie node, so it matches at most once
            let q = match reg.policy {
                DispatchPolicy::RoundRobin => {
                    reg.cursor.load(Ordering::Relaxed) % self.queues.len()
                }
                DispatchPolicy::FifoByKey => self.queue_for(reg, &full),
            };
            need[q] += 1;
            plan.push((reg, q));
        }
        // the dispatcher is the only producer, so free space can only grow
        for (q, &k) in need.iter().enumerate() {
            if k > 0 && self.queues[q].len() + k > self.queue_bound {
                return Err(Error::QueueFull(q));
            }
        }
        for (reg, q) in &plan {
            if reg.policy == DispatchPolicy::RoundRobin {
                reg.cursor.fetch_add(1, Ordering::Relaxed);
            }
            self.push(*q, &object, reg, arrived_at);
        }
        if plan.is_empty() {
            self.dropped_unmatched.fetch_add(1, Ordering::Relaxed);
        }
        Ok(plan.len())
    }

    fn push(
        &self,
        queue: usize,
        object: &ObjectRef,
        reg: &Arc<LambdaRegistration>,
        arrived_at: Instant,
    ) {
        let now = Instant::now();
        let ev = UpcallEvent {
            object: object.clone(),
            registration: Arc::clone(reg),
            arrived_at,
            enqueued_at: now,
            dequeued_at: now,
            queue,
        };
        self.progress.dispatched.fetch_add(1, Ordering::AcqRel);
        let ev = match self.queues[queue].try_send(ev) {
            Ok(()) => None,
            Err(TrySendError::Full(ev)) => Some(ev),
            Err(TrySendError::Disconnected(_)) => {
                self.progress.completed.fetch_add(1, Ordering::AcqRel);
                return;
            }
        };
        if let Some(mut ev) = ev {
            ev.enqueued_at = Instant::now();
            if self.queues[queue].send(ev).is_err() {
                self.progress.completed.fetch_add(1, Ordering::AcqRel);
                return;
            }
        }
        self.enqueued[queue].fetch_add(1, Ordering::Relaxed);
    }

    /// Events ever enqueued on each worker queue.
    pub fn enqueued_per_queue(&self) -> Vec<u64> {
        self.enqueued
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    pub fn queue_depths(&self) -> Vec<usize> {
        self.queues.iter().map(|q| q.len()).collect()
    }

    /// Objects that matched no registration.
    pub fn unmatched(&self) -> u64 {
        self.dropped_unmatched.load(Ordering::Relaxed)
    }

    pub fn failures(&self) -> Vec<LambdaFailure> {
        self.failures.lock().clone()
    }

    pub fn completed(&self) -> u64 {
        self.progress.completed.load(Ordering::Acquire)
    }

    /// Waits until every submitted object is dispatched and every enqueued
    /// event has run. Returns false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let p = &self.progress;
        let idle = || {
            p.unrouted.load(Ordering::Acquire) == 0
                && p.completed.load(Ordering::Acquire) >= p.dispatched.load(Ordering::Acquire)
        };
        let mut g = p.idle_lock.lock();
        loop {
            if idle() {
                return true;
            }
            if p.idle_cv.wait_until(&mut g, deadline).timed_out() {
                return idle();
            }
        }
    }

    /// Stops the dispatcher after it routes what was submitted, then closes
    /// the queues and joins the workers after they drain.
    pub fn shutdown(&self) {
        if let Some(h) = self.dispatcher.lock().take() {
            let _ = self.input.send(None);
            // the dispatcher may itself drop the last reference
            if h.thread().id() != thread::current().id() {
                let _ = h.join();
            }
        }
        let handles = std::mem::take(&mut *self.workers.lock());
        if handles.is_empty() {
            return;
        }
        // Senders live in self; replacing them is not possible through &self,
        // so workers are told to stop by a poison event per queue.
        for q in &self.queues {
            let _ = q.send(UpcallEvent::poison());
        }
        for h in handles {
            let _ = h.join();
        }
    }
}

impl Drop for FastPath {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Poison;

impl Upcall for Poison {
    fn upcall(&self, _: &UpcallEvent) -> std::result::Result<(), String> {
        Ok(())
    }
}

const POISON_ID: &str = "\0poison";

impl UpcallEvent {
    fn poison() -> Self {
        let now = Instant::now();
        UpcallEvent {
            object: ObjectRef::triggered(
                ObjectKey::compose("/_", "_").expect("static key"),
                Bytes::new(),
            ),
            registration: Arc::new(LambdaRegistration::new(
                POISON_ID,
                "/",
                DispatchPolicy::RoundRobin,
                Arc::new(Poison),
            )),
            arrived_at: now,
            enqueued_at: now,
            dequeued_at: now,
            queue: usize::MAX,
        }
    }

    fn is_poison(&self) -> bool {
        self.queue == usize::MAX && self.registration.lambda_id == POISON_ID
    }
}

fn worker_loop(
    rx: Receiver<UpcallEvent>,
    failures: Arc<Mutex<Vec<LambdaFailure>>>,
    progress: Arc<Progress>,
) {
    while let Ok(mut ev) = rx.recv() {
        if ev.is_poison() {
            break;
        }
        ev.dequeued_at = Instant::now();
        let handler = Arc::clone(&ev.registration.handler);
        let outcome = catch_unwind(AssertUnwindSafe(|| handler.upcall(&ev)));
        let message = match outcome {
            Ok(Ok(())) => None,
            Ok(Err(m)) => Some(m),
            Err(panic) => Some(
                panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "lambda panicked".to_string()),
            ),
        };
        if let Some(message) = message {
            let failure = LambdaFailure {
                lambda_id: ev.registration.lambda_id.clone(),
                key: ev.object.key().full(),
                queue: ev.queue,
                message,
            };
            log::warn!(
                "lambda {} failed on {}: {}",
                failure.lambda_id,
                failure.key,
                failure.message
            );
            failures.lock().push(failure);
        }
        drop(ev);
        progress.completed.fetch_add(1, Ordering::AcqRel);
        let _g = progress.idle_lock.lock();
        progress.idle_cv.notify_all();
    }
}
