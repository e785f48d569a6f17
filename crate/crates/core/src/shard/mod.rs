//! In-memory shard store.
//!
//! One writer (the shard's ordered-delivery context) installs new versions
//! through [`ShardWriter`]; any number of readers call the `get_*` family on
//! [`KvShard`] without taking locks. Each key slot carries a [`SeqGuard`]; a
//! read copies the payload inside the guard window and retries if a writer
//! was active.

mod cache;
mod guard;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use arc_swap::ArcSwapOption;
use bytes::Bytes;

pub use cache::LruCache;
pub use guard::{GuardState, SeqGuard};

use crate::error::{Error, Result};
use crate::hash::{stable_hash, Fnv1a};
use crate::model::{ObjectKey, Persistence, Version};

/// Upper bound on guarded read attempts before giving up.
pub const MAX_READ_RETRIES: u32 = 1000;
const BACKOFF_START: Duration = Duration::from_micros(1);
const BACKOFF_CAP: Duration = Duration::from_micros(1024);

/// Link to the previous version of the same key.
///
/// Volatile pools keep only the version stamp; persistent pools also keep the
/// record so versioned reads can walk the chain.
#[derive(Clone, Debug)]
pub struct Backpointer {
    pub version: Version,
    pub record: Option<Arc<VersionedObject>>,
}

#[derive(Clone, Debug)]
pub struct VersionedObject {
    pub key: ObjectKey,
    pub payload: Bytes,
    pub version: Version,
    pub prev: Option<Backpointer>,
    pub payload_checksum: u64,
}

impl VersionedObject {
    pub fn new(
        key: ObjectKey,
        payload: Bytes,
        version: Version,
        prev: Option<Backpointer>,
    ) -> Self {
        let payload_checksum = stable_hash(&payload).value();
        VersionedObject {
            key,
            payload,
            version,
            prev,
            payload_checksum,
        }
    }

    pub fn checksum_ok(&self) -> bool {
        stable_hash(&self.payload).value() == self.payload_checksum
    }

    /// Copy of this record with a privately owned payload and no backpointer
    /// record (only its stamp).
    fn detached_copy(&self, payload: Bytes) -> Self {
        VersionedObject {
            key: self.key.clone(),
            payload,
            version: self.version,
            prev: self.prev.as_ref().map(|bp| Backpointer {
                version: bp.version,
                record: bp.record.clone(),
            }),
            payload_checksum: self.payload_checksum,
        }
    }
}

struct Slot {
    guard: SeqGuard,
    head: ArcSwapOption<VersionedObject>,
}

/// Outcome of a guarded read, with the number of retries it took.
#[derive(Debug)]
pub struct TracedRead {
    pub object: VersionedObject,
    pub retries: u32,
}

pub struct KvShard {
    persistence: Persistence,
    slots: papaya::HashMap<String, Arc<Slot>>,
    writer_taken: AtomicBool,
}

impl KvShard {
    pub fn new(persistence: Persistence) -> Arc<Self> {
        Arc::new(KvShard {
            persistence,
            slots: papaya::HashMap::new(),
            writer_taken: AtomicBool::new(false),
        })
    }

    pub fn persistence(&self) -> Persistence {
        self.persistence
    }

    /// Takes the sole writer handle. Panics if called twice.
    pub fn writer(self: &Arc<Self>) -> ShardWriter {
        assert!(
            !self.writer_taken.swap(true, Ordering::AcqRel),
            "shard writer already taken"
        );
        ShardWriter {
            shard: Arc::clone(self),
        }
    }

    fn slot(&self, full_key: &str) -> Option<Arc<Slot>> {
        self.slots.pin().get(full_key).cloned()
    }

    pub fn contains(&self, key: &ObjectKey) -> bool {
        self.slot(&key.full()).is_some()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn guard_state(&self, key: &ObjectKey) -> Option<GuardState> {
        self.slot(&key.full()).map(|s| s.guard.state())
    }

    pub fn get_current(&self, key: &ObjectKey) -> Result<VersionedObject> {
        self.get_current_traced(key).map(|t| t.object)
    }

    pub fn get_current_traced(&self, key: &ObjectKey) -> Result<TracedRead> {
        let full = key.full();
        let slot = self
            .slot(&full)
            .ok_or_else(|| Error::KeyNotFound(full.clone()))?;
        let mut backoff = BACKOFF_START;
        for retries in 0..MAX_READ_RETRIES {
            let start = slot.guard.read_begin();
            let head = slot.head.load();
            let copied = head
                .as_ref()
                .map(|h| (Bytes::copy_from_slice(&h.payload), h));
            if slot.guard.read_validate(start) {
                if let Some((payload, h)) = copied {
                    return Ok(TracedRead {
                        object: h.detached_copy(payload),
                        retries,
                    });
                }
            }
            drop(copied);
            drop(head);
            if retries < 4 {
                std::hint::spin_loop();
            } else {
                thread::sleep(backoff);
                backoff = (backoff * 2).min(BACKOFF_CAP);
            }
        }
        Err(Error::RetryExhausted(full))
    }

    /// Shared reference to the current record, without copying the payload.
    /// Used by the dispatcher, which only needs a stable handle.
    pub fn head(&self, key: &ObjectKey) -> Option<Arc<VersionedObject>> {
        self.slot(&key.full()).and_then(|s| s.head.load_full())
    }

    pub fn get_by_version(&self, key: &ObjectKey, version: u64) -> Result<VersionedObject> {
        let current = self.get_current(key)?;
        let not_found = || Error::VersionNotFound {
            key: key.full(),
            version,
        };
        if version > current.version.per_key_version {
            return Err(not_found());
        }
        if version == current.version.per_key_version {
            return Ok(current);
        }
        let mut cursor = current
            .prev
            .and_then(|bp| bp.record)
            .ok_or_else(not_found)?;
        loop {
            if cursor.version.per_key_version == version {
                return Ok(cursor.detached_copy(cursor.payload.clone()));
            }
            cursor = cursor
                .prev
                .as_ref()
                .and_then(|bp| bp.record.clone())
                .ok_or_else(not_found)?;
        }
    }

    /// All versions in `[lo, hi]`, ascending.
    pub fn get_range_by_version(
        &self,
        key: &ObjectKey,
        lo: u64,
        hi: u64,
    ) -> Result<Vec<VersionedObject>> {
        if lo > hi {
            return Err(Error::VersionNotFound {
                key: key.full(),
                version: lo,
            });
        }
        let current = self.get_current(key)?;
        if hi > current.version.per_key_version {
            return Err(Error::VersionNotFound {
                key: key.full(),
                version: hi,
            });
        }
        let mut out = Vec::with_capacity((hi - lo + 1) as usize);
        let mut cursor: Option<Arc<VersionedObject>> = Some(Arc::new(current));
        while let Some(rec) = cursor {
            let v = rec.version.per_key_version;
            if v < lo {
                break;
            }
            if v <= hi {
                out.push(rec.detached_copy(rec.payload.clone()));
            }
            cursor = rec.prev.as_ref().and_then(|bp| bp.record.clone());
        }
        if out.len() as u64 != hi - lo + 1 {
            return Err(Error::VersionNotFound {
                key: key.full(),
                version: lo,
            });
        }
        out.reverse();
        Ok(out)
    }

    /// Current version of every key, ordered by key. Two members agree iff
    /// their snapshots compare equal.
    pub fn table_snapshot(&self) -> BTreeMap<String, (Version, Bytes)> {
        let pinned = self.slots.pin();
        pinned
            .iter()
            .filter_map(|(k, slot)| {
                slot.head
                    .load_full()
                    .map(|h| (k.clone(), (h.version, h.payload.clone())))
            })
            .collect()
    }

    /// Digest of [`KvShard::table_snapshot`].
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (k, (v, p)) in self.table_snapshot() {
            h.update(k.as_bytes());
            h.update(&v.per_key_version.to_le_bytes());
            h.update(&v.shard_seq.to_le_bytes());
            h.update(&v.timestamp_us.to_le_bytes());
            h.update(&p);
        }
        h.finish().value()
    }
}

/// The single update-application handle of a [`KvShard`].
pub struct ShardWriter {
    shard: Arc<KvShard>,
}

impl ShardWriter {
    pub fn shard(&self) -> &Arc<KvShard> {
        &self.shard
    }

    /// Installs a new version of `key`.
    pub fn apply_put(
        &mut self,
        payload: Bytes,
        key: ObjectKey,
        shard_seq: u64,
        timestamp_us: u64,
    ) -> Arc<VersionedObject> {
        self.apply_put_observed(payload, key, shard_seq, timestamp_us, |_| {})
    }

    /// As [`ShardWriter::apply_put`], calling `inside` while the guard window
    /// is open (after `v_a` moved, before the data and `v_b`).
    pub fn apply_put_observed(
        &mut self,
        payload: Bytes,
        key: ObjectKey,
        shard_seq: u64,
        timestamp_us: u64,
        inside: impl FnOnce(&SeqGuard),
    ) -> Arc<VersionedObject> {
        let full = key.full();
        let slot = match self.shard.slot(&full) {
            Some(s) => s,
            None => {
                let s = Arc::new(Slot {
                    guard: SeqGuard::new(),
                    head: ArcSwapOption::empty(),
                });
                self.shard.slots.pin().insert(full, Arc::clone(&s));
                s
            }
        };
        let prev = slot.head.load_full();
        let per_key_version = prev.as_ref().map_or(0, |p| p.version.per_key_version + 1);
        let timestamp_us = prev
            .as_ref()
            .map_or(timestamp_us, |p| timestamp_us.max(p.version.timestamp_us));
        let version = Version {
            per_key_version,
            shard_seq,
            timestamp_us,
        };
        let keep_history = self.shard.persistence == Persistence::Persistent;
        let backpointer = prev.map(|p| Backpointer {
            version: p.version,
            record: keep_history.then_some(p),
        });
        let record = Arc::new(VersionedObject::new(key, payload, version, backpointer));

        let ticket = slot.guard.begin_write();
        inside(&slot.guard);
        slot.head.store(Some(Arc::clone(&record)));
        slot.guard.end_write(ticket);
        record
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> ObjectKey {
        ObjectKey::compose("/p", s).unwrap()
    }

    fn put(w: &mut ShardWriter, k: &str, payload: &str, seq: u64) -> Arc<VersionedObject> {
        w.apply_put(Bytes::from(payload.to_string()), key(k), seq, seq * 10)
    }

    #[test]
    fn chain_starts_at_zero_and_links_back() {
        let shard = KvShard::new(Persistence::Persistent);
        let mut w = shard.writer();
        let first = put(&mut w, "k", "a", 1);
        assert_eq!(first.version.per_key_version, 0);
        assert!(first.prev.is_none());
        put(&mut w, "k", "b", 2);
        let third = put(&mut w, "k", "c", 3);
        assert_eq!(third.version.per_key_version, 2);
        let prev = third.prev.as_ref().unwrap();
        assert_eq!(prev.version.per_key_version, 1);
        assert_eq!(&prev.record.as_ref().unwrap().payload[..], b"b");
    }

    #[test]
    fn guard_transitions_during_put() {
        let shard = KvShard::new(Persistence::Volatile);
        let mut w = shard.writer();
        for i in 0..3 {
            put(&mut w, "k", "x", i + 1);
        }
        assert_eq!(
            shard.guard_state(&key("k")),
            Some(GuardState { v_a: 3, v_b: 3 })
        );
        let mut seen = None;
        w.apply_put_observed(Bytes::from_static(b"y"), key("k"), 4, 40, |g| {
            seen = Some(g.state())
        });
        assert_eq!(seen, Some(GuardState { v_a: 4, v_b: 3 }));
        assert_eq!(
            shard.guard_state(&key("k")),
            Some(GuardState { v_a: 4, v_b: 4 })
        );
    }

    #[test]
    fn quiescent_read_needs_no_retry() {
        let shard = KvShard::new(Persistence::Volatile);
        let mut w = shard.writer();
        put(&mut w, "k", "hello", 1);
        let r = shard.get_current_traced(&key("k")).unwrap();
        assert_eq!(r.retries, 0);
        assert_eq!(&r.object.payload[..], b"hello");
        assert!(r.object.checksum_ok());
    }

    #[test]
    fn read_during_open_window_retries() {
        let shard = KvShard::new(Persistence::Volatile);
        let mut w = shard.writer();
        put(&mut w, "k", "v0", 1);
        let (tx, rx) = std::sync::mpsc::channel();
        let reader = Arc::clone(&shard);
        w.apply_put_observed(Bytes::from_static(b"v1"), key("k"), 2, 20, |_| {
            let h = thread::spawn(move || reader.get_current_traced(&key("k")).unwrap());
            thread::sleep(Duration::from_millis(20));
            tx.send(h).unwrap();
        });
        let traced = rx.recv().unwrap().join().unwrap();
        assert!(traced.retries > 0);
        assert_eq!(&traced.object.payload[..], b"v1");
    }

    #[test]
    fn stuck_writer_exhausts_retries() {
        let shard = KvShard::new(Persistence::Volatile);
        let mut w = shard.writer();
        put(&mut w, "k", "v0", 1);
        let reader = Arc::clone(&shard);
        w.apply_put_observed(Bytes::from_static(b"v1"), key("k"), 2, 20, |_| {
            let r = reader.get_current(&key("k"));
            assert!(matches!(r, Err(Error::RetryExhausted(_))));
        });
    }

    #[test]
    fn absent_key() {
        let shard = KvShard::new(Persistence::Volatile);
        assert!(matches!(
            shard.get_current(&key("nope")),
            Err(Error::KeyNotFound(_))
        ));
    }

    #[test]
    fn versioned_reads() {
        let shard = KvShard::new(Persistence::Persistent);
        let mut w = shard.writer();
        for (i, p) in ["a", "b", "c"].iter().enumerate() {
            put(&mut w, "k", p, i as u64 + 1);
        }
        assert_eq!(
            &shard.get_by_version(&key("k"), 1).unwrap().payload[..],
            b"b"
        );
        assert!(matches!(
            shard.get_by_version(&key("k"), 7),
            Err(Error::VersionNotFound { .. })
        ));
        let all = shard.get_range_by_version(&key("k"), 0, 2).unwrap();
        let payloads: Vec<_> = all.iter().map(|o| o.payload.clone()).collect();
        assert_eq!(
            payloads,
            vec![Bytes::from("a"), Bytes::from("b"), Bytes::from("c")]
        );
        assert_eq!(
            shard.get_range_by_version(&key("k"), 1, 1).unwrap().len(),
            1
        );
        assert!(matches!(
            shard.get_range_by_version(&key("k"), 0, 5),
            Err(Error::VersionNotFound { .. })
        ));
    }

    #[test]
    fn volatile_keeps_only_head() {
        let shard = KvShard::new(Persistence::Volatile);
        let mut w = shard.writer();
        put(&mut w, "k", "a", 1);
        put(&mut w, "k", "b", 2);
        assert_eq!(
            &shard.get_by_version(&key("k"), 1).unwrap().payload[..],
            b"b"
        );
        assert!(matches!(
            shard.get_by_version(&key("k"), 0),
            Err(Error::VersionNotFound { .. })
        ));
        let head = shard.get_current(&key("k")).unwrap();
        assert_eq!(head.prev.as_ref().unwrap().version.per_key_version, 0);
    }

    #[test]
    #[should_panic(expected = "already taken")]
    fn single_writer() {
        let shard = KvShard::new(Persistence::Volatile);
        let _a = shard.writer();
        let _b = shard.writer();
    }

    #[test]
    fn snapshot_and_digest_track_contents() {
        let shard = KvShard::new(Persistence::Volatile);
        let d0 = shard.digest();
        let mut w = shard.writer();
        put(&mut w, "k", "a", 1);
        assert_ne!(shard.digest(), d0);
        assert_eq!(shard.table_snapshot().len(), 1);
    }
}
