//! Client SDK. One TCP connection per node, requests multiplexed by
//! correlation id. Puts go to the home shard's sequencer with at most
//! `window` in flight per shard; reads and trigger puts go to a random live
//! member.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use kvflow_core::{Error, ObjectKey, Persistence, PoolRegistry, Result, Version};
use parking_lot::{Mutex, RwLock};
use rand::seq::IndexedRandom;

use crate::cms::topic_key;
use crate::view::ClusterView;
use crate::wire::{read_frame, Request, Response, ServerTiming, ShardId, CLIENT_MAGIC};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
/// How long a put keeps retrying while the shard has no ready sequencer.
const REROUTE_DEADLINE: Duration = Duration::from_secs(15);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectReply {
    pub key: String,
    pub version: Version,
    pub payload: Bytes,
}

/// A committed put, with the client-observed round trip and the server's
/// breakdown of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PutReply {
    pub version: Version,
    pub rtt_ns: u64,
    pub timing: ServerTiming,
    /// Client to server transfer, estimated as half the network time.
    pub submitting_ns: u64,
    /// Commit to the reply leaving the server, plus the other half of the
    /// network time.
    pub reply_ns: u64,
}

impl PutReply {
    fn new(version: Version, timing: ServerTiming, rtt: Duration) -> Self {
        let rtt_ns = rtt.as_nanos() as u64;
        let net = rtt_ns.saturating_sub(timing.residence_ns);
        let staged =
            timing.queue_ns + timing.multicast_ns + timing.processing_ns + timing.persistence_ns;
        PutReply {
            version,
            rtt_ns,
            timing,
            submitting_ns: net / 2,
            reply_ns: net - net / 2 + timing.residence_ns.saturating_sub(staged),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Notification {
    pub topic: String,
    pub seq: u64,
    pub version: Version,
    pub payload: Bytes,
}

/// Returns a window slot when dropped.
struct Permit(Sender<()>);

impl Drop for Permit {
    fn drop(&mut self) {
        let _ = self.0.send(());
    }
}

struct Waiter {
    tx: Sender<(Response, Instant)>,
    _permit: Option<Permit>,
}

struct Conn {
    node: u32,
    writer: Mutex<TcpStream>,
    pending: Mutex<HashMap<u64, Waiter>>,
    subs: Mutex<HashMap<u64, Sender<Response>>>,
    closed: AtomicBool,
}

impl Conn {
    fn open(node: u32, addr: SocketAddr) -> Result<Arc<Conn>> {
        let mut s = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT)
            .map_err(|_| Error::NodeUnreachable(node))?;
        s.set_nodelay(true)?;
        s.write_all(&CLIENT_MAGIC)
            .map_err(|_| Error::NodeUnreachable(node))?;
        let reader = s.try_clone()?;
        let conn = Arc::new(Conn {
            node,
            writer: Mutex::new(s),
            pending: Mutex::new(HashMap::new()),
            subs: Mutex::new(HashMap::new()),
            closed: AtomicBool::new(false),
        });
        let c = Arc::clone(&conn);
        thread::Builder::new()
            .name(format!("client-rx-{node}"))
            .spawn(move || c.read_loop(reader))?;
        Ok(conn)
    }

    fn read_loop(&self, stream: TcpStream) {
        let mut r = BufReader::with_capacity(256 << 10, stream);
        while let Ok(Some((ty, body))) = read_frame(&mut r) {
            let resp = match Response::decode(ty, body) {
                Ok(resp) => resp,
                Err(e) => {
                    log::error!("client: bad frame from node {}: {e}", self.node);
                    break;
                }
            };
            let corr = resp.corr();
            if matches!(resp, Response::Notify { .. }) {
                if let Some(tx) = self.subs.lock().get(&corr) {
                    let _ = tx.send(resp);
                }
                continue;
            }
            // the permit is released here, before the caller wakes
            if let Some(w) = self.pending.lock().remove(&corr) {
                let _ = w.tx.send((resp, Instant::now()));
            }
        }
        self.close();
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Release);
        let _ = self.writer.lock().shutdown(Shutdown::Both);
        self.pending.lock().clear();
        self.subs.lock().clear();
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    /// Sends `req`; the reply arrives on the returned channel, which
    /// disconnects if the connection drops first.
    fn call(&self, req: Request, permit: Option<Permit>) -> Result<Receiver<(Response, Instant)>> {
        let corr = req.corr();
        let (tx, rx) = bounded(1);
        self.pending.lock().insert(
            corr,
            Waiter {
                tx,
                _permit: permit,
            },
        );
        let frame = req.encode();
        if self.is_closed() || self.writer.lock().write_all(&frame).is_err() {
            self.pending.lock().remove(&corr);
            self.close();
            return Err(Error::NodeUnreachable(self.node));
        }
        Ok(rx)
    }
}

fn remote(code: u16, message: String) -> Error {
    Error::Remote { code, message }
}

fn unexpected(resp: Response) -> Error {
    match resp {
        Response::Error { code, message, .. } => remote(code, message),
        other => Error::Protocol(format!("unexpected response {other:?}")),
    }
}

/// A put that has been sent but not yet answered.
pub struct PendingPut {
    rx: Receiver<(Response, Instant)>,
    node: u32,
    sent: Instant,
}

impl PendingPut {
    /// When the request was written to the socket.
    pub fn sent_at(&self) -> Instant {
        self.sent
    }

    pub fn wait(self) -> Result<PutReply> {
        let (resp, arrived) = self
            .rx
            .recv()
            .map_err(|_| Error::NodeUnreachable(self.node))?;
        match resp {
            Response::PutOk {
                version, timing, ..
            } => Ok(PutReply::new(version, timing, arrived - self.sent)),
            other => Err(unexpected(other)),
        }
    }
}

/// Notifications for one topic. The stream ends when the connection to the
/// serving node drops.
pub struct Subscription {
    topic: String,
    corr: u64,
    rx: Receiver<Response>,
    conn: Weak<Conn>,
    last_seq: Option<u64>,
    gaps: u64,
}

impl Subscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    /// Blocks for the next notification; `None` once the stream has ended.
    pub fn recv(&mut self) -> Option<Notification> {
        let resp = self.rx.recv().ok()?;
        Some(self.accept(resp))
    }

    /// Like [`Subscription::recv`] but gives up after `timeout`. The error
    /// says whether the stream timed out or ended.
    pub fn recv_timeout(
        &mut self,
        timeout: Duration,
    ) -> std::result::Result<Notification, RecvTimeoutError> {
        let resp = self.rx.recv_timeout(timeout)?;
        Ok(self.accept(resp))
    }

    /// Messages skipped between deliveries, judged by the topic sequence.
    pub fn gaps(&self) -> u64 {
        self.gaps
    }

    fn accept(&mut self, resp: Response) -> Notification {
        let Response::Notify {
            topic,
            seq,
            version,
            payload,
            ..
        } = resp
        else {
            unreachable!("only notifications are routed to subscriptions")
        };
        if let Some(last) = self.last_seq {
            self.gaps += seq.saturating_sub(last + 1);
        }
        self.last_seq = Some(seq);
        Notification {
            topic,
            seq,
            version,
            payload,
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(c) = self.conn.upgrade() {
            c.subs.lock().remove(&self.corr);
        }
    }
}

struct ClientInner {
    seeds: Vec<SocketAddr>,
    window: usize,
    view: RwLock<(ClusterView, PoolRegistry)>,
    stale: AtomicBool,
    conns: Mutex<HashMap<u32, Arc<Conn>>>,
    windows: Mutex<HashMap<ShardId, Window>>,
    next_corr: AtomicU64,
}

/// Permits for in-flight puts to one shard.
type Window = (Sender<()>, Receiver<()>);

#[derive(Clone)]
pub struct Client {
    inner: Arc<ClientInner>,
}

impl Client {
    /// Connects through any node and fetches the cluster view. The default
    /// window is 3 puts per shard.
    pub fn connect(addr: SocketAddr) -> Result<Client> {
        Self::connect_with_window(addr, 3)
    }

    pub fn connect_with_window(addr: SocketAddr, window: usize) -> Result<Client> {
        let view = fetch_view(addr, 0)?;
        let registry = view.registry()?;
        let mut seeds = vec![addr];
        seeds.extend(view.nodes.iter().map(|n| n.addr).filter(|a| *a != addr));
        Ok(Client {
            inner: Arc::new(ClientInner {
                seeds,
                window: window.max(1),
                view: RwLock::new((view, registry)),
                stale: AtomicBool::new(false),
                conns: Mutex::new(HashMap::new()),
                windows: Mutex::new(HashMap::new()),
                next_corr: AtomicU64::new(1),
            }),
        })
    }

    pub fn view(&self) -> ClusterView {
        self.inner.view.read().0.clone()
    }

    pub fn registry(&self) -> PoolRegistry {
        self.inner.view.read().1.clone()
    }

    /// Fetches a fresh view from the first node that answers.
    pub fn refresh_view(&self) -> Result<ClusterView> {
        let current = self.view();
        let mut addrs: Vec<SocketAddr> = current
            .nodes
            .iter()
            .filter(|n| n.live)
            .map(|n| n.addr)
            .collect();
        addrs.extend(self.inner.seeds.iter().copied());
        let mut last = Error::ShardUnavailable("no node answered a view request".into());
        for addr in addrs {
            match fetch_view(addr, self.corr()) {
                Ok(v) => {
                    if v.view_id >= current.view_id {
                        let registry = v.registry()?;
                        *self.inner.view.write() = (v.clone(), registry);
                        self.inner.stale.store(false, Ordering::Release);
                        return Ok(v);
                    }
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    pub fn close(&self) {
        for (_, c) in self.inner.conns.lock().drain() {
            c.close();
        }
    }

    fn corr(&self) -> u64 {
        self.inner.next_corr.fetch_add(1, Ordering::Relaxed)
    }

    fn conn(&self, node: u32) -> Result<Arc<Conn>> {
        let mut conns = self.inner.conns.lock();
        if let Some(c) = conns.get(&node) {
            if !c.is_closed() {
                return Ok(Arc::clone(c));
            }
        }
        let addr = self
            .inner
            .view
            .read()
            .0
            .addr_of(node)
            .ok_or(Error::NodeUnreachable(node))?;
        let c = Conn::open(node, addr)
            .inspect_err(|_| self.inner.stale.store(true, Ordering::Release))?;
        conns.insert(node, Arc::clone(&c));
        Ok(c)
    }

    fn maybe_refresh(&self) {
        if self.inner.stale.load(Ordering::Acquire) {
            let _ = self.refresh_view();
        }
    }

    fn parse(&self, key: &str) -> Result<(ObjectKey, ShardId)> {
        let v = self.inner.view.read();
        let k = v.1.parse_key(key)?;
        let shard = v.0.home(&k)?;
        Ok((k, shard))
    }

    fn permit(&self, shard: &ShardId) -> Permit {
        let (tx, rx) = {
            let mut w = self.inner.windows.lock();
            w.entry(shard.clone())
                .or_insert_with(|| {
                    let (tx, rx) = bounded(self.inner.window);
                    for _ in 0..self.inner.window {
                        tx.send(()).expect("window has room");
                    }
                    (tx, rx)
                })
                .clone()
        };
        rx.recv()
            .expect("window sender is held alongside the receiver");
        Permit(tx)
    }

    /// Sends a put to the current sequencer without waiting for the commit.
    /// Blocks while the shard's window is full.
    pub fn put_async(&self, key: &str, payload: Bytes) -> Result<PendingPut> {
        self.send_put(key, |corr, key| Request::Put {
            corr,
            key,
            payload: payload.clone(),
        })
    }

    fn send_put(&self, key: &str, make: impl Fn(u64, String) -> Request) -> Result<PendingPut> {
        self.maybe_refresh();
        let (k, shard) = self.parse(key)?;
        let full = k.full();
        let deadline = Instant::now() + REROUTE_DEADLINE;
        loop {
            let seq = self.inner.view.read().0.sequencer(&shard);
            let attempt = match seq {
                None => Err(Error::ShardUnavailable(shard.to_string())),
                Some(node) => self.conn(node).and_then(|c| {
                    let permit = self.permit(&shard);
                    let sent = Instant::now();
                    c.call(make(self.corr(), full.clone()), Some(permit))
                        .map(|rx| PendingPut { rx, node, sent })
                }),
            };
            match attempt {
                Ok(p) => return Ok(p),
                Err(e) if Instant::now() < deadline => {
                    log::debug!("client: rerouting put to {shard}: {e}");
                    thread::sleep(Duration::from_millis(20));
                    let _ = self.refresh_view();
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Puts and waits for the commit. Retries while the shard is between
    /// sequencers; a put whose connection drops after sending is not retried.
    pub fn put(&self, key: &str, payload: Bytes) -> Result<PutReply> {
        self.put_with(key, |corr, key| Request::Put {
            corr,
            key,
            payload: payload.clone(),
        })
    }

    fn put_with(&self, key: &str, make: impl Fn(u64, String) -> Request) -> Result<PutReply> {
        let deadline = Instant::now() + REROUTE_DEADLINE;
        loop {
            match self.send_put(key, &make)?.wait() {
                Err(Error::Remote { code, message }) if code == 27 || code == 18 => {
                    if Instant::now() >= deadline {
                        return Err(remote(code, message));
                    }
                    thread::sleep(Duration::from_millis(20));
                    let _ = self.refresh_view();
                }
                Err(e @ Error::NodeUnreachable(_)) => {
                    self.inner.stale.store(true, Ordering::Release);
                    return Err(e);
                }
                other => return other,
            }
        }
    }

    /// Publishes to a topic. `persistence` must match the topic pool's.
    pub fn publish(
        &self,
        topic: &str,
        persistence: Persistence,
        payload: Bytes,
    ) -> Result<PutReply> {
        let key = topic_key(topic)?;
        let topic = topic.to_string();
        self.put_with(&key, |corr, _| Request::Publish {
            corr,
            topic: topic.clone(),
            persistence,
            payload: payload.clone(),
        })
    }

    fn read_from(
        &self,
        shard: &ShardId,
        node: Option<u32>,
        make: impl Fn(u64) -> Request,
    ) -> Result<Response> {
        self.maybe_refresh();
        let mut tried = Vec::new();
        loop {
            let target = match node {
                Some(n) => n,
                None => {
                    let live = self.inner.view.read().0.live_members(shard);
                    let left: Vec<u32> = live.into_iter().filter(|m| !tried.contains(m)).collect();
                    *left
                        .choose(&mut rand::rng())
                        .ok_or_else(|| Error::ShardUnavailable(shard.to_string()))?
                }
            };
            tried.push(target);
            let sent = self
                .conn(target)
                .and_then(|c| c.call(make(self.corr()), None));
            match sent.and_then(|rx| rx.recv().map_err(|_| Error::NodeUnreachable(target))) {
                Ok((resp, _)) => return Ok(resp),
                Err(e) if node.is_some() => return Err(e),
                Err(_) => self.inner.stale.store(true, Ordering::Release),
            }
        }
    }

    fn object(
        &self,
        key: &str,
        node: Option<u32>,
        make: impl Fn(u64, String) -> Request,
    ) -> Result<ObjectReply> {
        let (k, shard) = self.parse(key)?;
        let full = k.full();
        match self.read_from(&shard, node, |corr| make(corr, full.clone()))? {
            Response::Object {
                key,
                version,
                payload,
                ..
            } => Ok(ObjectReply {
                key,
                version,
                payload,
            }),
            other => Err(unexpected(other)),
        }
    }

    pub fn get(&self, key: &str) -> Result<ObjectReply> {
        self.object(key, None, |corr, key| Request::Get { corr, key })
    }

    /// Reads from one specific member.
    pub fn get_from(&self, node: u32, key: &str) -> Result<ObjectReply> {
        self.object(key, Some(node), |corr, key| Request::Get { corr, key })
    }

    pub fn get_by_version(&self, key: &str, version: u64) -> Result<ObjectReply> {
        self.object(key, None, |corr, key| Request::GetByVersion {
            corr,
            key,
            version,
        })
    }

    pub fn get_by_time(&self, key: &str, t_us: u64) -> Result<ObjectReply> {
        self.object(key, None, |corr, key| Request::GetByTime {
            corr,
            key,
            t_us,
        })
    }

    pub fn get_by_time_from(&self, node: u32, key: &str, t_us: u64) -> Result<ObjectReply> {
        self.object(key, Some(node), |corr, key| Request::GetByTime {
            corr,
            key,
            t_us,
        })
    }

    /// Hands the object to one random live member of its home shard for
    /// lambda dispatch. Nothing is stored.
    pub fn trigger_put(&self, key: &str, payload: Bytes) -> Result<()> {
        let (k, shard) = self.parse(key)?;
        let full = k.full();
        match self.read_from(&shard, None, |corr| Request::TriggerPut {
            corr,
            key: full.clone(),
            payload: payload.clone(),
        })? {
            Response::Ack { .. } => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    /// Subscribes at a random live member of the topic's home shard.
    pub fn subscribe(&self, topic: &str) -> Result<Subscription> {
        let (_, shard) = self.parse(&topic_key(topic)?)?;
        let live = self.inner.view.read().0.live_members(&shard);
        let node = *live
            .choose(&mut rand::rng())
            .ok_or_else(|| Error::ShardUnavailable(shard.to_string()))?;
        self.subscribe_at(node, topic)
    }

    pub fn subscribe_at(&self, node: u32, topic: &str) -> Result<Subscription> {
        let conn = self.conn(node)?;
        let corr = self.corr();
        let (tx, rx) = unbounded();
        conn.subs.lock().insert(corr, tx);
        let reply = conn.call(
            Request::Subscribe {
                corr,
                topic: topic.to_string(),
            },
            None,
        );
        match reply.and_then(|r| {
            r.recv()
                .map(|(resp, _)| resp)
                .map_err(|_| Error::NodeUnreachable(node))
        }) {
            Ok(Response::Ack { .. }) => Ok(Subscription {
                topic: topic.to_string(),
                corr,
                rx,
                conn: Arc::downgrade(&conn),
                last_seq: None,
                gaps: 0,
            }),
            Ok(other) => {
                conn.subs.lock().remove(&corr);
                Err(unexpected(other))
            }
            Err(e) => Err(e),
        }
    }
}

/// One-shot VIEW request on a fresh connection.
fn fetch_view(addr: SocketAddr, corr: u64) -> Result<ClusterView> {
    let mut s = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT)?;
    s.set_read_timeout(Some(Duration::from_secs(5)))?;
    s.write_all(&CLIENT_MAGIC)?;
    s.write_all(&Request::View { corr }.encode())?;
    let (ty, body) =
        read_frame(&mut s)?.ok_or_else(|| Error::Protocol("connection closed".into()))?;
    let _ = s.shutdown(Shutdown::Both);
    match Response::decode(ty, body)? {
        Response::ViewOk { json, .. } => ClusterView::from_json(&json),
        other => Err(unexpected(other)),
    }
}
