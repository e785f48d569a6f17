//! Append-only per-shard-member log.
//!
//! The append context stages framed records into a write-back buffer; a
//! background thread flushes the buffer with one write and one sync per
//! batch, then publishes the batch into the per-key chain index and the
//! temporal index. Readers only ever see published (locally durable)
//! records. Temporal reads are further gated by the [`StabilityFrontier`],
//! the highest sequence number durable on every replica.

mod format;
mod index;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::{Condvar, Mutex, RwLock};

pub use format::{decode, DecodeError, LogRecord, NO_PREV, RECORD_OVERHEAD};
pub use index::{ChainIndex, IndexEntry, TemporalIndex};

use crate::error::{Error, Result};
use crate::model::{ObjectKey, Version};
use crate::shard::{Backpointer, VersionedObject};

#[derive(Clone, Debug)]
pub struct LogConfig {
    pub path: PathBuf,
    /// Maximum file size in bytes.
    pub size_budget: u64,
    /// Flush as soon as this many bytes are staged.
    pub flush_bytes: usize,
    /// ... or this long after the first record of a batch was staged.
    pub flush_interval: Duration,
    /// Extra delay after every sync; simulates slow storage.
    pub sync_delay: Duration,
    /// Default bound for [`PersistentLog::get_by_time`].
    pub get_timeout: Duration,
    /// Advance the stability frontier on local durability alone.
    pub single_replica: bool,
}

impl LogConfig {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        LogConfig {
            path: path.into(),
            size_budget: 8 << 30,
            flush_bytes: 1 << 20,
            flush_interval: Duration::from_millis(1),
            sync_delay: Duration::ZERO,
            get_timeout: Duration::from_secs(10),
            single_replica: false,
        }
    }

    pub fn single_replica(mut self) -> Self {
        self.single_replica = true;
        self
    }
}

/// Highest sequence number durable on all replicas, and its timestamp.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StabilityFrontier {
    pub stable_seq: u64,
    pub stable_ts: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LogStats {
    pub appends: u64,
    pub write_calls: u64,
    pub sync_calls: u64,
    pub bytes_written: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Shutdown {
    Running,
    Flush,
    Abandon,
}

struct Staging {
    buf: Vec<u8>,
    entries: Vec<IndexEntry>,
    first_at: Option<Instant>,
    shutdown: Shutdown,
}

struct AppendState {
    next_offset: u64,
    last_seq: u64,
    heads: HashMap<String, (u64, u64)>,
}

#[derive(Default)]
struct Published {
    chains: ChainIndex,
    temporal: TemporalIndex,
    seq_ts: Vec<(u64, u64)>,
}

impl Published {
    fn add(&mut self, e: &IndexEntry) {
        self.chains.insert(e);
        self.temporal.insert(e);
        self.seq_ts
            .push((e.version.shard_seq, e.version.timestamp_us));
    }

    fn ts_of(&self, seq: u64) -> Option<u64> {
        self.seq_ts
            .binary_search_by_key(&seq, |(s, _)| *s)
            .ok()
            .map(|i| self.seq_ts[i].1)
    }
}

struct Inner {
    config: LogConfig,
    file: Mutex<File>,
    reader: File,
    append: Mutex<AppendState>,
    staging: Mutex<Staging>,
    staged_cv: Condvar,
    published: RwLock<Published>,
    durable: Mutex<u64>,
    durable_cv: Condvar,
    frontier: Mutex<StabilityFrontier>,
    frontier_cv: Condvar,
    subscribers: Mutex<Vec<Sender<u64>>>,
    appends: AtomicU64,
    write_calls: AtomicU64,
    sync_calls: AtomicU64,
    bytes_written: AtomicU64,
}

/// Resolves once the record it was issued for is durable locally.
#[derive(Clone)]
pub struct Ticket {
    seq: u64,
    inner: Arc<Inner>,
}

impl Ticket {
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn is_durable(&self) -> bool {
        *self.inner.durable.lock() >= self.seq
    }

    pub fn wait(&self) {
        let mut d = self.inner.durable.lock();
        while *d < self.seq {
            self.inner.durable_cv.wait(&mut d);
        }
    }

    /// Returns false on timeout.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut d = self.inner.durable.lock();
        while *d < self.seq {
            if self
                .inner
                .durable_cv
                .wait_until(&mut d, deadline)
                .timed_out()
            {
                return *d >= self.seq;
            }
        }
        true
    }
}

/// What [`PersistentLog::open`] found on disk.
#[derive(Debug, Default)]
pub struct Recovery {
    /// Valid records in file order.
    pub records: Vec<LogRecord>,
    /// Bytes dropped from a torn or corrupt tail.
    pub dropped_bytes: u64,
}

pub struct PersistentLog {
    inner: Arc<Inner>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl PersistentLog {
    /// Opens (creating if needed) the log at `config.path`, replaying any
    /// existing records.
    pub fn open(config: LogConfig) -> Result<(Arc<Self>, Recovery)> {
        let (records, valid_len, file_len) = scan_file(&config.path)?;
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&config.path)?;
        if valid_len < file_len {
            file.set_len(valid_len)?;
            file.sync_all()?;
        }
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0))?;
        let reader = File::open(&config.path)?;

        let mut published = Published::default();
        let mut heads = HashMap::new();
        let mut offset = 0u64;
        let mut last_seq = 0;
        for rec in &records {
            let e = IndexEntry {
                key: rec.key.clone(),
                version: rec.version,
                offset,
            };
            published.add(&e);
            heads.insert(rec.key.clone(), (offset, rec.version.per_key_version));
            last_seq = rec.version.shard_seq;
            offset += rec.encoded_len() as u64;
        }

        let inner = Arc::new(Inner {
            file: Mutex::new(file),
            reader,
            append: Mutex::new(AppendState {
                next_offset: valid_len,
                last_seq,
                heads,
            }),
            staging: Mutex::new(Staging {
                buf: Vec::new(),
                entries: Vec::new(),
                first_at: None,
                shutdown: Shutdown::Running,
            }),
            staged_cv: Condvar::new(),
            published: RwLock::new(published),
            durable: Mutex::new(last_seq),
            durable_cv: Condvar::new(),
            frontier: Mutex::new(StabilityFrontier::default()),
            frontier_cv: Condvar::new(),
            subscribers: Mutex::new(Vec::new()),
            appends: AtomicU64::new(0),
            write_calls: AtomicU64::new(0),
            sync_calls: AtomicU64::new(0),
            bytes_written: AtomicU64::new(0),
            config,
        });
        if inner.config.single_replica {
            inner.advance_frontier(&[Some(last_seq)]);
        }
        let worker_inner = Arc::clone(&inner);
        let worker = thread::Builder::new()
            .name("log-writeback".into())
            .spawn(move || worker_inner.writeback_loop())?;
        let dropped_bytes = file_len - valid_len;
        if dropped_bytes > 0 {
            log::warn!(
                "log {:?}: dropped {dropped_bytes} bytes of torn tail",
                inner.config.path
            );
        }
        Ok((
            Arc::new(PersistentLog {
                inner,
                worker: Mutex::new(Some(worker)),
            }),
            Recovery {
                records,
                dropped_bytes,
            },
        ))
    }

    pub fn config(&self) -> &LogConfig {
        &self.inner.config
    }

    /// Stages a record for write-back. The caller is the single ordered
    /// append context; `version.shard_seq` must be exactly one past the last
    /// appended sequence number (any value for the first record).
    pub fn append(&self, key: &ObjectKey, payload: Bytes, version: Version) -> Result<Ticket> {
        let full = key.full();
        let mut st = self.inner.append.lock();
        assert!(
            st.last_seq == 0 || version.shard_seq == st.last_seq + 1,
            "out-of-order append: seq {} after {}",
            version.shard_seq,
            st.last_seq
        );
        let prev_offset = match st.heads.get(&full) {
            Some(&(off, v)) => {
                assert_eq!(
                    version.per_key_version,
                    v + 1,
                    "version chain gap for {full}"
                );
                off as i64
            }
            None => {
                assert_eq!(
                    version.per_key_version, 0,
                    "first record of {full} must be version 0"
                );
                NO_PREV
            }
        };
        let rec = LogRecord {
            key: full,
            payload,
            version,
            prev_offset,
        };
        let len = rec.encoded_len() as u64;
        if st.next_offset + len > self.inner.config.size_budget {
            return Err(Error::LogFull {
                budget: self.inner.config.size_budget,
            });
        }
        let offset = st.next_offset;
        st.next_offset += len;
        st.last_seq = version.shard_seq;
        st.heads
            .insert(rec.key.clone(), (offset, version.per_key_version));
        {
            let mut staging = self.inner.staging.lock();
            rec.encode_into(&mut staging.buf);
            staging.entries.push(IndexEntry {
                key: rec.key,
                version,
                offset,
            });
            if staging.first_at.is_none() {
                staging.first_at = Some(Instant::now());
            }
        }
        self.inner.staged_cv.notify_one();
        self.inner.appends.fetch_add(1, Ordering::Relaxed);
        Ok(Ticket {
            seq: version.shard_seq,
            inner: Arc::clone(&self.inner),
        })
    }

    /// Highest appended sequence number (staged or durable).
    pub fn last_appended_seq(&self) -> u64 {
        self.inner.append.lock().last_seq
    }

    pub fn durable_seq(&self) -> u64 {
        *self.inner.durable.lock()
    }

    /// Channel receiving the local durable sequence number after each flush.
    pub fn subscribe_durable(&self) -> Receiver<u64> {
        let (tx, rx) = unbounded();
        self.inner.subscribers.lock().push(tx);
        rx
    }

    pub fn stats(&self) -> LogStats {
        let i = &self.inner;
        LogStats {
            appends: i.appends.load(Ordering::Relaxed),
            write_calls: i.write_calls.load(Ordering::Relaxed),
            sync_calls: i.sync_calls.load(Ordering::Relaxed),
            bytes_written: i.bytes_written.load(Ordering::Relaxed),
        }
    }

    pub fn frontier(&self) -> StabilityFrontier {
        *self.inner.frontier.lock()
    }

    /// Recomputes the frontier from one durable-ack entry per replica
    /// (including this one). Unchanged while any replica has not acked.
    pub fn advance_frontier(&self, acked: &[Option<u64>]) -> StabilityFrontier {
        self.inner.advance_frontier(acked)
    }

    /// Highest version of `key` whose timestamp is `<= t_us`.
    pub fn time_to_version(&self, key: &str, t_us: u64) -> Result<Version> {
        match self.inner.published.read().chains.version_at(key, t_us) {
            None => Err(Error::KeyNotFound(key.to_string())),
            Some(None) => Err(Error::NotFound {
                key: key.to_string(),
                t_us,
            }),
            Some(Some((v, _))) => Ok(v),
        }
    }

    /// Version of `key` as of time `t_us`, waiting (up to the configured
    /// bound) until the frontier covers `t_us`.
    pub fn get_by_time(&self, key: &str, t_us: u64) -> Result<LogRecord> {
        self.get_by_time_within(key, t_us, self.inner.config.get_timeout)
    }

    pub fn get_by_time_within(&self, key: &str, t_us: u64, timeout: Duration) -> Result<LogRecord> {
        self.wait_stable_ts(t_us, timeout)?;
        let offset = match self.inner.published.read().chains.version_at(key, t_us) {
            None => return Err(Error::KeyNotFound(key.to_string())),
            Some(None) => {
                return Err(Error::NotFound {
                    key: key.to_string(),
                    t_us,
                })
            }
            Some(Some((_, off))) => off,
        };
        self.read_at(offset)
    }

    /// Blocks until `stable_ts >= t_us`.
    pub fn wait_stable_ts(&self, t_us: u64, timeout: Duration) -> Result<StabilityFrontier> {
        let deadline = Instant::now() + timeout;
        let mut f = self.inner.frontier.lock();
        while f.stable_ts < t_us {
            if self
                .inner
                .frontier_cv
                .wait_until(&mut f, deadline)
                .timed_out()
                && f.stable_ts < t_us
            {
                return Err(Error::Timeout(format!(
                    "stability frontier at {}us has not reached {}us",
                    f.stable_ts, t_us
                )));
            }
        }
        Ok(*f)
    }

    pub fn get_by_version(&self, key: &str, version: u64) -> Result<LogRecord> {
        let offset = self.offset_of(key, version)?;
        self.read_at(offset)
    }

    /// Versions `lo..=hi` of `key`, ascending, found by following on-disk
    /// backpointers down from version `hi`.
    pub fn get_range_by_version(&self, key: &str, lo: u64, hi: u64) -> Result<Vec<LogRecord>> {
        if lo > hi {
            return Err(Error::VersionNotFound {
                key: key.to_string(),
                version: lo,
            });
        }
        let mut offset = self.offset_of(key, hi)? as i64;
        let mut out = Vec::with_capacity((hi - lo + 1) as usize);
        loop {
            let rec = self.read_at(offset as u64)?;
            let v = rec.version.per_key_version;
            let prev = rec.prev_offset;
            out.push(rec);
            if v == lo {
                break;
            }
            if prev == NO_PREV {
                return Err(Error::CorruptLog(format!(
                    "chain of {key} ends at version {v}"
                )));
            }
            offset = prev;
        }
        out.reverse();
        Ok(out)
    }

    fn offset_of(&self, key: &str, version: u64) -> Result<u64> {
        let published = self.inner.published.read();
        let chain = published
            .chains
            .chain(key)
            .ok_or_else(|| Error::KeyNotFound(key.to_string()))?;
        chain
            .get(version as usize)
            .map(|(_, off)| *off)
            .ok_or_else(|| Error::VersionNotFound {
                key: key.to_string(),
                version,
            })
    }

    /// Reads one record straight from the file.
    pub fn read_at(&self, offset: u64) -> Result<LogRecord> {
        let mut len = [0u8; 4];
        self.inner.reader.read_exact_at(&mut len, offset)?;
        let total = u32::from_le_bytes(len) as usize + 4;
        let mut buf = vec![0u8; total];
        self.inner.reader.read_exact_at(&mut buf, offset)?;
        decode(&buf)
            .map(|(r, _)| r)
            .map_err(|e| Error::CorruptLog(format!("record at {offset}: {e:?}")))
    }

    /// Published records with timestamps in `[lo, hi]`, in time order, as
    /// `(timestamp_us, shard_seq, offset, key)`.
    pub fn temporal_window(&self, lo: u64, hi: u64) -> Vec<(u64, u64, u64, String)> {
        self.inner.published.read().temporal.window(lo, hi).to_vec()
    }

    /// Every published record, read back from the file in log order.
    pub fn records(&self) -> Result<Vec<LogRecord>> {
        let mut offsets: Vec<u64> = self
            .inner
            .published
            .read()
            .temporal
            .window(0, u64::MAX)
            .iter()
            .map(|e| e.2)
            .collect();
        offsets.sort_unstable();
        offsets.into_iter().map(|o| self.read_at(o)).collect()
    }

    pub fn indexed_records(&self) -> usize {
        self.inner.published.read().temporal.len()
    }

    pub fn keys(&self) -> Vec<String> {
        self.inner.published.read().chains.keys().cloned().collect()
    }

    /// Flushes everything staged and stops the write-back thread.
    pub fn close(&self) {
        self.stop(Shutdown::Flush);
    }

    /// Stops the write-back thread discarding staged records, as a crash
    /// would. Outstanding tickets never resolve.
    pub fn abandon(&self) {
        self.stop(Shutdown::Abandon);
    }

    fn stop(&self, how: Shutdown) {
        {
            let mut s = self.inner.staging.lock();
            if s.shutdown == Shutdown::Running {
                s.shutdown = how;
            }
        }
        self.inner.staged_cv.notify_all();
        if let Some(h) = self.worker.lock().take() {
            let _ = h.join();
        }
    }
}

impl Drop for PersistentLog {
    fn drop(&mut self) {
        self.stop(Shutdown::Flush);
    }
}

/// Converts a log record into a store object (backpointer stamp only).
pub fn record_to_object(rec: &LogRecord, key: ObjectKey, prev: Option<Version>) -> VersionedObject {
    VersionedObject::new(
        key,
        rec.payload.clone(),
        rec.version,
        prev.map(|version| Backpointer {
            version,
            record: None,
        }),
    )
}

impl Inner {
    fn writeback_loop(&self) {
        loop {
            let (buf, entries) = {
                let mut s = self.staging.lock();
                loop {
                    match s.shutdown {
                        Shutdown::Abandon => return,
                        Shutdown::Flush if s.entries.is_empty() => return,
                        Shutdown::Flush => break,
                        Shutdown::Running => {}
                    }
                    match s.first_at {
                        None => self.staged_cv.wait(&mut s),
                        Some(first) => {
                            let deadline = first + self.config.flush_interval;
                            if s.buf.len() >= self.config.flush_bytes || Instant::now() >= deadline
                            {
                                break;
                            }
                            self.staged_cv.wait_until(&mut s, deadline);
                        }
                    }
                }
                s.first_at = None;
                (std::mem::take(&mut s.buf), std::mem::take(&mut s.entries))
            };
            if let Err(e) = self.write_batch(&buf) {
                log::error!("log {:?}: write-back failed: {e}", self.config.path);
                return;
            }
            let last = entries.last().map(|e| e.version.shard_seq).unwrap_or(0);
            {
                let mut p = self.published.write();
                for e in &entries {
                    p.add(e);
                }
            }
            *self.durable.lock() = last;
            self.durable_cv.notify_all();
            if self.config.single_replica {
                self.advance_frontier(&[Some(last)]);
            }
            self.subscribers.lock().retain(|tx| tx.send(last).is_ok());
        }
    }

    fn write_batch(&self, buf: &[u8]) -> std::io::Result<()> {
        let mut f = self.file.lock();
        f.write_all(buf)?;
        self.write_calls.fetch_add(1, Ordering::Relaxed);
        self.bytes_written
            .fetch_add(buf.len() as u64, Ordering::Relaxed);
        f.sync_data()?;
        self.sync_calls.fetch_add(1, Ordering::Relaxed);
        if !self.config.sync_delay.is_zero() {
            thread::sleep(self.config.sync_delay);
        }
        Ok(())
    }

    fn advance_frontier(&self, acked: &[Option<u64>]) -> StabilityFrontier {
        let mut f = self.frontier.lock();
        if acked.is_empty() || acked.iter().any(Option::is_none) {
            return *f;
        }
        let local = *self.durable.lock();
        let target = acked
            .iter()
            .flatten()
            .copied()
            .min()
            .unwrap_or(0)
            .min(local);
        if target > f.stable_seq {
            if let Some(ts) = self.published.read().ts_of(target) {
                f.stable_seq = target;
                f.stable_ts = ts;
                self.frontier_cv.notify_all();
            }
        }
        *f
    }
}

/// Reads and validates a log file. Returns the valid records, the length of
/// the valid prefix and the file length.
fn scan_file(path: &Path) -> Result<(Vec<LogRecord>, u64, u64)> {
    let mut data = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut data)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0, 0)),
        Err(e) => return Err(e.into()),
    }
    let mut records = Vec::new();
    let mut at = 0usize;
    let mut heads: HashMap<String, (u64, u64)> = HashMap::new();
    let mut last_seq = 0u64;
    while at < data.len() {
        let problem = match decode(&data[at..]) {
            Ok((rec, len)) => match check_links(&rec, &heads, last_seq) {
                None => {
                    heads.insert(rec.key.clone(), (at as u64, rec.version.per_key_version));
                    last_seq = rec.version.shard_seq;
                    records.push(rec);
                    at += len;
                    continue;
                }
                Some(why) => why,
            },
            Err(DecodeError::Truncated) => "truncated record",
            Err(DecodeError::Corrupt(why)) => why,
        };
        if records.is_empty() {
            return Err(Error::CorruptLog(format!(
                "{:?}: first record unreadable: {problem}",
                path
            )));
        }
        log::warn!("log {path:?}: stopping replay at offset {at}: {problem}");
        break;
    }
    Ok((records, at as u64, data.len() as u64))
}

fn check_links(
    rec: &LogRecord,
    heads: &HashMap<String, (u64, u64)>,
    last_seq: u64,
) -> Option<&'static str> {
    if last_seq != 0 && rec.version.shard_seq != last_seq + 1 {
        return Some("sequence number out of order");
    }
    match heads.get(&rec.key) {
        Some(&(off, v))
            if rec.prev_offset != off as i64 || rec.version.per_key_version != v + 1 =>
        {
            Some("backpointer disagrees with chain")
        }
        None if rec.prev_offset != NO_PREV || rec.version.per_key_version != 0 => {
            Some("chain start malformed")
        }
        _ => None,
    }
}

impl std::fmt::Debug for PersistentLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PersistentLog")
            .field("path", &self.inner.config.path)
            .finish()
    }
}
