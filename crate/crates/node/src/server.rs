//! The node daemon: listener, peer mesh, failure detection, request
//! handling, and the store API that lambdas see.

use std::collections::{HashMap, HashSet};
use std::io::{BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use kvflow_core::dfg::{
    instantiate, load_dfg, DfgDescriptor, LambdaContext, LambdaRegistry, StoreApi,
};
use kvflow_core::fastpath::{FastPath, FastPathConfig, ObjectRef};
use kvflow_core::log::record_to_object;
use kvflow_core::shard::{LruCache, VersionedObject};
use kvflow_core::{Error, ObjectKey, Persistence, PoolRegistry, Result, Version};
use parking_lot::{Condvar, Mutex, RwLock};
use rand::seq::IndexedRandom;

use crate::client::Client;
use crate::cms::{cms_dfg, topic_key, CmsHub, CMS_LAMBDA, TOPIC_POOL};
use crate::config::ServiceConfig;
use crate::replication::{Commit, ReplicaOptions, ShardReplica, Transport};
use crate::view::{ClusterView, Membership};
use crate::wire::{
    read_frame, HelloShard, PeerMsg, Request, Response, ShardId, CLIENT_MAGIC, PEER_MAGIC,
};

/// Outbound half of a client connection. Responses are never dropped;
/// notifications are bounded per connection.
pub(crate) struct ConnOut {
    tx: Sender<(Bytes, bool)>,
    queued_notifies: AtomicUsize,
    stream: TcpStream,
    closed: AtomicBool,
}

impl ConnOut {
    fn spawn(stream: TcpStream) -> Result<Arc<Self>> {
        let (tx, rx) = unbounded::<(Bytes, bool)>();
        let out = Arc::new(ConnOut {
            tx,
            queued_notifies: AtomicUsize::new(0),
            stream: stream.try_clone()?,
            closed: AtomicBool::new(false),
        });
        let o = Arc::clone(&out);
        thread::Builder::new()
            .name("conn-writer".into())
            .spawn(move || {
                let mut w = BufWriter::with_capacity(64 << 10, stream);
                while let Ok(first) = rx.recv() {
                    let mut next = Some(first);
                    while let Some((frame, notify)) = next.take() {
                        if notify {
                            o.queued_notifies.fetch_sub(1, Ordering::AcqRel);
                        }
                        if w.write_all(&frame).is_err() {
                            o.close();
                            return;
                        }
                        next = rx.try_recv().ok();
                    }
                    if w.flush().is_err() {
                        o.close();
                        return;
                    }
                }
            })?;
        Ok(out)
    }

    pub(crate) fn send(&self, resp: Response) {
        let _ = self.tx.send((resp.encode(), false));
    }

    /// Queues a notification unless `limit` are already queued, in which case
    /// the connection is closed. Returns whether the subscriber is still
    /// connected.
    pub(crate) fn try_notify(&self, frame: Bytes, limit: usize) -> bool {
        if self.is_closed() {
            return false;
        }
        if self.queued_notifies.fetch_add(1, Ordering::AcqRel) >= limit {
            log::warn!("disconnecting a subscriber that fell {limit} notifications behind");
            self.close();
            return false;
        }
        let _ = self.tx.send((frame, true));
        true
    }

    pub(crate) fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Release);
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Outgoing peer links.
struct Peers {
    me: u32,
    links: RwLock<HashMap<u32, Sender<Bytes>>>,
    failures: Sender<u32>,
}

impl Transport for Peers {
    fn send(&self, to: u32, frame: Bytes) {
        if let Some(tx) = self.links.read().get(&to) {
            let _ = tx.send(frame);
        }
    }
}

impl Peers {
    fn connect(&self, id: u32, addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
        loop {
            match TcpStream::connect_timeout(&addr, Duration::from_millis(250)) {
                Ok(mut s) => {
                    s.set_nodelay(true)?;
                    let mut hello = PEER_MAGIC.to_vec();
                    hello.extend_from_slice(&self.me.to_le_bytes());
                    s.write_all(&hello)?;
                    return Ok(s);
                }
                Err(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(50)),
                Err(_) => return Err(Error::BootstrapTimeout(format!("node {id} at {addr}"))),
            }
        }
    }

    fn add_link(&self, id: u32, stream: TcpStream) -> Result<JoinHandle<()>> {
        let (tx, rx) = unbounded::<Bytes>();
        self.links.write().insert(id, tx);
        let failures = self.failures.clone();
        let h = thread::Builder::new()
            .name(format!("peer-out-{id}"))
            .spawn(move || {
                let mut w = BufWriter::with_capacity(256 << 10, stream);
                while let Ok(first) = rx.recv() {
                    let mut next = Some(first);
                    let mut ok = true;
                    while let Some(frame) = next.take() {
                        if w.write_all(&frame).is_err() {
                            ok = false;
                            break;
                        }
                        next = rx.try_recv().ok();
                    }
                    if !ok || w.flush().is_err() {
                        let _ = failures.send(id);
                        return;
                    }
                }
                let _ = w.get_ref().shutdown(Shutdown::Both);
            })?;
        Ok(h)
    }
}

/// Extra start-up inputs that do not live in the config file.
#[derive(Default)]
pub struct NodeOptions {
    /// Lambdas available to the DFG, in addition to the built-in `noop`,
    /// `relay` and `cms`.
    pub lambdas: LambdaRegistry,
    /// Used instead of the config's DFG file when set.
    pub dfg: Option<DfgDescriptor>,
    /// An already-bound listener to serve on.
    pub listener: Option<TcpListener>,
}

struct Inner {
    config: ServiceConfig,
    me: u32,
    view: Arc<Membership>,
    registry: PoolRegistry,
    replicas: HashMap<ShardId, Arc<ShardReplica>>,
    fastpath: Arc<FastPath>,
    peers: Arc<Peers>,
    cms: Arc<CmsHub>,
    local_addr: SocketAddr,
    stopping: AtomicBool,
    hellos: Mutex<HashSet<u32>>,
    hello_cv: Condvar,
    last_seen: Mutex<HashMap<u32, Instant>>,
    sockets: Mutex<Vec<TcpStream>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    client: Mutex<Option<Client>>,
    cache: Mutex<LruCache>,
}

/// A running node. Dropping it shuts it down cleanly.
pub struct Node {
    inner: Arc<Inner>,
}

impl Node {
    pub fn start(config: ServiceConfig, opts: NodeOptions) -> Result<Node> {
        config.validate()?;
        let registry = config.registry()?;
        let me = config.node_id;
        let view = Arc::new(Membership::new(&config));
        let fastpath = FastPath::new(FastPathConfig {
            workers: config.workers,
            queue_bound: config.queue_bound,
        });
        let (fail_tx, fail_rx) = unbounded();
        let peers = Arc::new(Peers {
            me,
            links: RwLock::new(HashMap::new()),
            failures: fail_tx,
        });
        let ropts = ReplicaOptions {
            log_flush_interval: Duration::from_micros(config.log_flush_interval_us),
            log_sync_delay: Duration::from_micros(config.log_sync_delay_us),
            trace: config.trace_deliveries,
        };
        let log_dir = config.log_dir.join(format!("node{me}"));
        let mut replicas = HashMap::new();
        for shard in view.snapshot().shards_of(me) {
            let pool = registry.get(&shard.pool).expect("validated pool").clone();
            let transport: Arc<dyn Transport> = peers.clone();
            let r = ShardReplica::open(
                shard.clone(),
                pool,
                view.clone(),
                transport,
                fastpath.clone(),
                &log_dir,
                &ropts,
            )?;
            replicas.insert(shard, r);
        }

        let listener = match opts.listener {
            Some(l) => l,
            None => TcpListener::bind(config.listen)?,
        };
        let local_addr = listener.local_addr()?;
        let inner = Arc::new(Inner {
            me,
            view,
            registry,
            replicas,
            fastpath,
            peers,
            cms: CmsHub::new(config.subscriber_buffer),
            local_addr,
            stopping: AtomicBool::new(false),
            hellos: Mutex::new(HashSet::new()),
            hello_cv: Condvar::new(),
            last_seen: Mutex::new(HashMap::new()),
            sockets: Mutex::new(Vec::new()),
            threads: Mutex::new(Vec::new()),
            client: Mutex::new(None),
            cache: Mutex::new(LruCache::new(config.cache_bytes)),
            config,
        });
        let node = Node { inner };
        if let Err(e) = node.boot(listener, fail_rx, opts.lambdas, opts.dfg) {
            node.stop(false);
            return Err(e);
        }
        Ok(node)
    }

    fn boot(
        &self,
        listener: TcpListener,
        fail_rx: Receiver<u32>,
        lambdas: LambdaRegistry,
        dfg: Option<DfgDescriptor>,
    ) -> Result<()> {
        let inner = &self.inner;
        let i = Arc::clone(inner);
        let h = thread::Builder::new()
            .name(format!("accept-{}", inner.me))
            .spawn(move || i.accept_loop(listener))?;
        inner.threads.lock().push(h);

        // dial everyone, then wait for everyone's HELLO
        let deadline = Instant::now() + inner.config.bootstrap_timeout();
        let others: Vec<_> = inner
            .config
            .nodes
            .iter()
            .filter(|n| n.id != inner.me)
            .cloned()
            .collect();
        for n in &others {
            let s = inner.peers.connect(n.id, n.addr, deadline)?;
            inner.sockets.lock().push(s.try_clone()?);
            let h = inner.peers.add_link(n.id, s)?;
            inner.threads.lock().push(h);
        }
        let shards: Vec<HelloShard> = inner
            .replicas
            .values()
            .map(|r| {
                let (last_seq, last_ts) = r.hello_state();
                HelloShard {
                    shard: r.id.clone(),
                    last_seq,
                    last_ts,
                }
            })
            .collect();
        let hello = PeerMsg::Hello {
            from: inner.me,
            shards,
        }
        .encode();
        for n in &others {
            inner.peers.send(n.id, hello.clone());
        }
        {
            let mut got = inner.hellos.lock();
            while let Some(missing) = others.iter().find(|n| !got.contains(&n.id)) {
                if inner.hello_cv.wait_until(&mut got, deadline).timed_out()
                    && !got.contains(&missing.id)
                {
                    return Err(Error::BootstrapTimeout(format!(
                        "node {} at {}",
                        missing.id, missing.addr
                    )));
                }
            }
        }
        for r in inner.replicas.values() {
            let (seq, ts) = r.hello_state();
            r.on_hello(inner.me, seq, ts);
        }
        let now = Instant::now();
        inner
            .last_seen
            .lock()
            .extend(others.iter().map(|n| (n.id, now)));

        let i = Arc::clone(inner);
        let h = thread::Builder::new()
            .name(format!("monitor-{}", inner.me))
            .spawn(move || i.monitor_loop(fail_rx))?;
        inner.threads.lock().push(h);

        self.install_dfg(lambdas, dfg)?;
        log::info!(
            "node {} up on {} in view {}",
            inner.me,
            inner.local_addr,
            inner.view.view_id()
        );
        Ok(())
    }

    fn install_dfg(&self, mut lambdas: LambdaRegistry, dfg: Option<DfgDescriptor>) -> Result<()> {
        let inner = &self.inner;
        lambdas.insert("noop", Arc::new(|_: &LambdaContext<'_>| Ok(())));
        lambdas.insert(
            "relay",
            Arc::new(|ctx: &LambdaContext<'_>| {
                let suffix = ctx.key().suffix().to_string();
                ctx.emit(ctx.payload().clone(), &suffix)
            }),
        );
        lambdas.insert(CMS_LAMBDA, Arc::new(inner.cms.lambda()));
        let dfg = match (dfg, &inner.config.dfg) {
            (Some(d), _) => {
                d.validate(&inner.registry, &lambdas)?;
                Some(d)
            }
            (None, Some(path)) => {
                let json = std::fs::read(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Some(load_dfg(&json, &inner.registry, &lambdas)?)
            }
            (None, None) => None,
        };
        let store: Arc<dyn StoreApi> = Arc::new(NodeStore {
            inner: Arc::downgrade(inner),
            pools: inner.registry.clone(),
        });
        let has_cms_vertex = dfg
            .as_ref()
            .is_some_and(|d| d.vertices.iter().any(|v| v.lambda == CMS_LAMBDA));
        if let Some(d) = &dfg {
            instantiate(d, &lambdas, &inner.fastpath, Arc::clone(&store))?;
        }
        if inner.registry.get(TOPIC_POOL).is_some() && !has_cms_vertex {
            instantiate(&cms_dfg(), &lambdas, &inner.fastpath, store)?;
        }
        Ok(())
    }

    pub fn id(&self) -> u32 {
        self.inner.me
    }

    pub fn addr(&self) -> SocketAddr {
        self.inner.local_addr
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn view(&self) -> ClusterView {
        self.inner.view.snapshot()
    }

    pub fn view_id(&self) -> u64 {
        self.inner.view.view_id()
    }

    pub fn registry(&self) -> &PoolRegistry {
        &self.inner.registry
    }

    pub fn fastpath(&self) -> &Arc<FastPath> {
        &self.inner.fastpath
    }

    pub fn cms(&self) -> &Arc<CmsHub> {
        &self.inner.cms
    }

    pub fn replica(&self, shard: &ShardId) -> Option<&Arc<ShardReplica>> {
        self.inner.replicas.get(shard)
    }

    pub fn replicas(&self) -> impl Iterator<Item = &Arc<ShardReplica>> {
        self.inner.replicas.values()
    }

    /// Sequencing state of every shard this node sequences.
    pub fn is_ready(&self) -> bool {
        self.inner
            .replicas
            .values()
            .filter(|r| self.inner.view.sequencer(&r.id) == Some(self.inner.me))
            .all(|r| r.is_ready())
    }

    /// Graceful stop: logs are flushed.
    pub fn shutdown(self) {
        self.stop(false);
    }

    /// Simulated crash: sockets are cut and unflushed log records are lost.
    pub fn kill(self) {
        self.stop(true);
    }

    fn stop(&self, crash: bool) {
        let inner = &self.inner;
        if inner.stopping.swap(true, Ordering::AcqRel) {
            return;
        }
        // wake the acceptor
        let _ = TcpStream::connect_timeout(&inner.local_addr, Duration::from_millis(100));
        for s in inner.sockets.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        inner.peers.links.write().clear();
        for r in inner.replicas.values() {
            r.stop(crash);
        }
        inner.fastpath.shutdown();
        if let Some(c) = inner.client.lock().take() {
            c.close();
        }
        let handles: Vec<_> = inner.threads.lock().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.stop(false);
    }
}

impl Inner {
    fn accept_loop(self: Arc<Self>, listener: TcpListener) {
        for stream in listener.incoming() {
            if self.stopping.load(Ordering::Acquire) {
                return;
            }
            let Ok(stream) = stream else { continue };
            let i = Arc::clone(&self);
            let _ = thread::Builder::new()
                .name(format!("conn-{}", self.me))
                .spawn(move || i.serve(stream));
        }
    }

    fn serve(self: Arc<Self>, mut stream: TcpStream) {
        let mut magic = [0u8; 4];
        if stream.read_exact(&mut magic).is_err() || self.stopping.load(Ordering::Acquire) {
            return;
        }
        let _ = stream.set_nodelay(true);
        if let Ok(s) = stream.try_clone() {
            self.sockets.lock().push(s);
        }
        match magic {
            CLIENT_MAGIC => self.serve_client(stream),
            PEER_MAGIC => {
                let mut id = [0u8; 4];
                if stream.read_exact(&mut id).is_ok() {
                    self.serve_peer(u32::from_le_bytes(id), stream);
                }
            }
            _ => log::warn!(
                "node {}: dropping connection with bad magic {magic:?}",
                self.me
            ),
        }
    }

    fn serve_peer(self: &Arc<Self>, from: u32, stream: TcpStream) {
        let mut r = std::io::BufReader::with_capacity(256 << 10, stream);
        while let Ok(Some((ty, body))) = read_frame(&mut r) {
            self.last_seen.lock().insert(from, Instant::now());
            match PeerMsg::decode(ty, body) {
                Ok(msg) => self.on_peer_msg(from, msg),
                Err(e) => log::error!("node {}: bad frame from {from}: {e}", self.me),
            }
        }
        if !self.stopping.load(Ordering::Acquire) {
            let _ = self.peers.failures.send(from);
        }
    }

    fn on_peer_msg(self: &Arc<Self>, from: u32, msg: PeerMsg) {
        match msg {
            PeerMsg::Hello { shards, .. } => {
                for s in shards {
                    if let Some(r) = self.replicas.get(&s.shard) {
                        r.on_hello(from, s.last_seq, s.last_ts);
                    }
                }
                self.hellos.lock().insert(from);
                self.hello_cv.notify_all();
            }
            PeerMsg::Mcast(m) => {
                if let Some(r) = self.replicas.get(&m.shard) {
                    r.on_mcast(m);
                }
            }
            PeerMsg::McastAck { shard, from, seq } => {
                if let Some(r) = self.replicas.get(&shard) {
                    r.on_mcast_ack(from, seq);
                }
            }
            PeerMsg::PersistAck { shard, from, seq } => {
                if let Some(r) = self.replicas.get(&shard) {
                    r.on_persist_ack(from, seq);
                }
            }
            PeerMsg::Trig { key, payload } => match self.registry.parse_key(&key) {
                Ok(k) => {
                    self.fastpath.submit(ObjectRef::triggered(k, payload));
                }
                Err(e) => log::warn!("node {}: dropping trigger put: {e}", self.me),
            },
            PeerMsg::GapReq {
                shard,
                from,
                from_seq,
            } => {
                if let Some(r) = self.replicas.get(&shard) {
                    r.on_gap_req(from, from_seq);
                }
            }
            PeerMsg::GapEnd {
                shard,
                from,
                last_seq,
            } => {
                if let Some(r) = self.replicas.get(&shard) {
                    r.on_gap_end(from, last_seq);
                }
            }
            PeerMsg::Heartbeat { .. } => {}
        }
    }

    fn monitor_loop(self: Arc<Self>, failures: Receiver<u32>) {
        let beat = self.config.heartbeat();
        let mut next_beat = Instant::now();
        while !self.stopping.load(Ordering::Acquire) {
            match failures.recv_timeout(next_beat.saturating_duration_since(Instant::now())) {
                Ok(id) => self.handle_failure(id, "connection lost"),
                Err(RecvTimeoutError::Timeout) => {
                    next_beat = Instant::now() + beat;
                    let frame = PeerMsg::Heartbeat {
                        from: self.me,
                        view_id: self.view.view_id(),
                    }
                    .encode();
                    let live = self.view.live_nodes();
                    for id in live.iter().filter(|id| **id != self.me) {
                        self.peers.send(*id, frame.clone());
                    }
                    let timeout = self.config.failure_timeout();
                    let silent: Vec<u32> = self
                        .last_seen
                        .lock()
                        .iter()
                        .filter(|(id, seen)| live.contains(id) && seen.elapsed() > timeout)
                        .map(|(id, _)| *id)
                        .collect();
                    for id in silent {
                        self.handle_failure(id, "heartbeat timeout");
                    }
                    for r in self.replicas.values() {
                        r.expire(self.config.commit_timeout());
                    }
                }
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }

    fn handle_failure(&self, id: u32, why: &str) {
        if self.stopping.load(Ordering::Acquire) || id == self.me {
            return;
        }
        if !self.view.mark_failed(id) {
            return;
        }
        log::warn!(
            "node {}: removing node {id} ({why}), now in view {}",
            self.me,
            self.view.view_id()
        );
        self.peers.links.write().remove(&id);
        let view = self.view.snapshot();
        for r in self.replicas.values() {
            if view.members(&r.id).contains(&id) {
                r.on_view_change();
            }
        }
    }

    fn serve_client(self: &Arc<Self>, stream: TcpStream) {
        let Ok(out) = ConnOut::spawn(stream.try_clone().expect("clone socket")) else {
            return;
        };
        let mut r = std::io::BufReader::with_capacity(256 << 10, stream);
        while let Ok(Some((ty, body))) = read_frame(&mut r) {
            let t_recv = Instant::now();
            match Request::decode(ty, body) {
                Ok(req) => self.handle(req, t_recv, &out),
                Err(e) => {
                    log::warn!("node {}: bad client frame: {e}", self.me);
                    break;
                }
            }
        }
        out.close();
    }

    fn handle(self: &Arc<Self>, req: Request, t_recv: Instant, out: &Arc<ConnOut>) {
        let corr = req.corr();
        let result: Result<Option<Response>> = match req {
            Request::Put { key, payload, .. } => self
                .client_put(corr, &key, payload, None, t_recv, out)
                .map(|_| None),
            Request::Publish {
                topic,
                persistence,
                payload,
                ..
            } => topic_key(&topic)
                .and_then(|key| {
                    self.client_put(corr, &key, payload, Some(persistence), t_recv, out)
                })
                .map(|_| None),
            Request::TriggerPut { key, payload, .. } => self.registry.parse_key(&key).map(|k| {
                self.fastpath.submit(ObjectRef::triggered(k, payload));
                Some(Response::Ack { corr })
            }),
            Request::Get { key, .. } => self
                .local_get(&key)
                .map(|o| Some(object_response(corr, &o))),
            Request::GetByVersion { key, version, .. } => self
                .local_get_by_version(&key, version)
                .map(|o| Some(object_response(corr, &o))),
            Request::GetByTime { key, t_us, .. } => {
                // may wait for the stability frontier, so keep it off the connection thread
                let i = Arc::clone(self);
                let out = Arc::clone(out);
                let _ = thread::Builder::new()
                    .name("get-by-time".into())
                    .spawn(move || {
                        let resp = match i.local_get_by_time(&key, t_us) {
                            Ok(o) => object_response(corr, &o),
                            Err(e) => Response::error(corr, &e),
                        };
                        out.send(resp);
                    });
                Ok(None)
            }
            Request::Subscribe { topic, .. } => {
                let after = topic_key(&topic)
                    .and_then(|k| self.local_get(&k))
                    .ok()
                    .map(|o| o.version.per_key_version);
                self.cms
                    .subscribe(&topic, corr, Arc::clone(out), after)
                    .map(|_| Some(Response::Ack { corr }))
            }
            Request::View { .. } => Ok(Some(Response::ViewOk {
                corr,
                json: self.view.snapshot().to_json(),
            })),
        };
        match result {
            Ok(Some(resp)) => out.send(resp),
            Ok(None) => {}
            Err(e) => out.send(Response::error(corr, &e)),
        }
    }

    fn home_replica(&self, key: &ObjectKey) -> Result<&Arc<ShardReplica>> {
        let (_, shard) = self.registry.home_shard(key)?;
        let id = ShardId::new(key.pool_path(), shard);
        self.replicas.get(&id).ok_or_else(|| {
            Error::ShardUnavailable(format!("node {} is not a member of {id}", self.me))
        })
    }

    fn client_put(
        &self,
        corr: u64,
        key: &str,
        payload: Bytes,
        expect: Option<Persistence>,
        t_recv: Instant,
        out: &Arc<ConnOut>,
    ) -> Result<()> {
        let key = self.registry.parse_key(key)?;
        let replica = self.home_replica(&key).map_err(|_| {
            let (_, shard) = self
                .registry
                .home_shard(&key)
                .expect("parsed key has a pool");
            Error::NotSequencer(
                self.view
                    .sequencer(&ShardId::new(key.pool_path(), shard))
                    .unwrap_or(0),
            )
        })?;
        if let Some(p) = expect {
            if p != replica.pool().persistence {
                return Err(Error::InvalidPool {
                    path: replica.pool().path.clone(),
                    reason: format!(
                        "publish asked for {p:?} but the pool is {:?}",
                        replica.pool().persistence
                    ),
                });
            }
        }
        let out = Arc::clone(out);
        replica.submit(
            key,
            payload,
            t_recv,
            Box::new(move |r: Result<Commit>| {
                let resp = match r {
                    Ok(c) => {
                        let mut timing = c.timing;
                        timing.residence_ns = t_recv.elapsed().as_nanos() as u64;
                        Response::PutOk {
                            corr,
                            version: c.version,
                            timing,
                        }
                    }
                    Err(e) => Response::error(corr, &e),
                };
                out.send(resp);
            }),
        )
    }

    fn local_get(&self, key: &str) -> Result<VersionedObject> {
        let key = self.registry.parse_key(key)?;
        self.home_replica(&key)?.store().get_current(&key)
    }

    fn local_get_by_version(&self, key: &str, version: u64) -> Result<VersionedObject> {
        let key = self.registry.parse_key(key)?;
        self.home_replica(&key)?
            .store()
            .get_by_version(&key, version)
    }

    fn local_get_by_time(&self, key: &str, t_us: u64) -> Result<VersionedObject> {
        let key = self.registry.parse_key(key)?;
        let replica = self.home_replica(&key)?;
        let log = replica
            .log()
            .ok_or_else(|| Error::NotPersistent(key.pool_path().to_string()))?;
        let rec = log.get_by_time(&key.full(), t_us)?;
        Ok(record_to_object(&rec, key, None))
    }

    fn internal_client(&self) -> Result<Client> {
        let mut c = self.client.lock();
        if let Some(c) = c.as_ref() {
            return Ok(c.clone());
        }
        let client = Client::connect_with_window(self.local_addr, self.config.window)?;
        *c = Some(client.clone());
        Ok(client)
    }

    /// Puts from inside the node: sequenced locally when this node is the
    /// sequencer, otherwise sent like any client put.
    fn put(&self, key: &ObjectKey, payload: Bytes) -> Result<Version> {
        if let Ok(r) = self.home_replica(key) {
            if self.view.sequencer(&r.id) == Some(self.me) {
                let (tx, rx) = bounded(1);
                r.submit(
                    key.clone(),
                    payload,
                    Instant::now(),
                    Box::new(move |res| {
                        let _ = tx.send(res);
                    }),
                )?;
                let c = rx
                    .recv()
                    .map_err(|_| Error::ShardUnavailable(r.id.to_string()))??;
                return Ok(c.version);
            }
        }
        Ok(self.internal_client()?.put(&key.full(), payload)?.version)
    }

    fn trigger_put(&self, key: &ObjectKey, payload: Bytes) -> Result<()> {
        let (_, shard) = self.registry.home_shard(key)?;
        let shard = ShardId::new(key.pool_path(), shard);
        let target = *self
            .view
            .live_members(&shard)
            .choose(&mut rand::rng())
            .ok_or_else(|| Error::ShardUnavailable(shard.to_string()))?;
        if target == self.me {
            self.fastpath
                .submit(ObjectRef::triggered(key.clone(), payload));
            return Ok(());
        }
        if !self.peers.links.read().contains_key(&target) {
            return Err(Error::NodeUnreachable(target));
        }
        self.peers.send(
            target,
            PeerMsg::Trig {
                key: key.full(),
                payload,
            }
            .encode(),
        );
        Ok(())
    }

    fn remote_object(&self, o: crate::client::ObjectReply) -> Result<VersionedObject> {
        let key = self.registry.parse_key(&o.key)?;
        let obj = VersionedObject::new(key, o.payload, o.version, None);
        self.cache.lock().insert(Arc::new(obj.clone()));
        Ok(obj)
    }
}

fn object_response(corr: u64, o: &VersionedObject) -> Response {
    Response::Object {
        corr,
        key: o.key.full(),
        version: o.version,
        payload: o.payload.clone(),
    }
}

/// The store as seen by lambdas running on this node. Objects homed
/// elsewhere are fetched through a client and kept in an LRU cache, which
/// serves repeat reads of the same version.
struct NodeStore {
    inner: Weak<Inner>,
    pools: PoolRegistry,
}

impl NodeStore {
    fn inner(&self) -> Result<Arc<Inner>> {
        self.inner
            .upgrade()
            .ok_or_else(|| Error::ShardUnavailable("node stopped".into()))
    }
}

impl StoreApi for NodeStore {
    fn pools(&self) -> &PoolRegistry {
        &self.pools
    }

    fn put(&self, key: &ObjectKey, payload: Bytes) -> Result<Version> {
        self.inner()?.put(key, payload)
    }

    fn trigger_put(&self, key: &ObjectKey, payload: Bytes) -> Result<()> {
        self.inner()?.trigger_put(key, payload)
    }

    fn get_current(&self, key: &ObjectKey) -> Result<VersionedObject> {
        let inner = self.inner()?;
        if let Ok(r) = inner.home_replica(key) {
            return r.store().get_current(key);
        }
        let o = inner.internal_client()?.get(&key.full())?;
        inner.remote_object(o)
    }

    fn get_by_version(&self, key: &ObjectKey, version: u64) -> Result<VersionedObject> {
        let inner = self.inner()?;
        if let Ok(r) = inner.home_replica(key) {
            return r.store().get_by_version(key, version);
        }
        if let Some(hit) = inner.cache.lock().lookup(&key.full()) {
            if hit.version.per_key_version == version {
                return Ok(VersionedObject::new(
                    hit.key.clone(),
                    hit.payload.clone(),
                    hit.version,
                    None,
                ));
            }
        }
        let o = inner
            .internal_client()?
            .get_by_version(&key.full(), version)?;
        inner.remote_object(o)
    }

    fn get_by_time(&self, key: &ObjectKey, t_us: u64) -> Result<VersionedObject> {
        let inner = self.inner()?;
        if inner.home_replica(key).is_ok() {
            return inner.local_get_by_time(&key.full(), t_us);
        }
        let o = inner.internal_client()?.get_by_time(&key.full(), t_us)?;
        inner.remote_object(o)
    }

    fn placement(&self, key: &ObjectKey) -> Option<(usize, usize)> {
        let inner = self.inner.upgrade()?;
        let (_, shard) = inner.registry.home_shard(key).ok()?;
        let live = inner
            .view
            .live_members(&ShardId::new(key.pool_path(), shard));
        live.iter()
            .position(|m| *m == inner.me)
            .map(|i| (i, live.len()))
    }

    fn hosts_pool(&self, pool_path: &str) -> bool {
        self.inner
            .upgrade()
            .is_some_and(|i| i.replicas.keys().any(|s| s.pool == pool_path))
    }
}
