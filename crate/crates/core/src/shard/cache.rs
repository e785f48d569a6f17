use std::sync::Arc;

use lru::LruCache as Lru;

use super::VersionedObject;

/// LRU cache of remotely-homed objects, bounded by total payload bytes.
pub struct LruCache {
    capacity: usize,
    used: usize,
    entries: Lru<String, Arc<VersionedObject>>,
}

impl LruCache {
    pub fn new(capacity_bytes: usize) -> Self {
        LruCache {
            capacity: capacity_bytes,
            used: 0,
            entries: Lru::unbounded(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn used_bytes(&self) -> usize {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts (or replaces) the entry for the object's full key, evicting
    /// least-recently-used entries until the byte budget holds. Objects larger
    /// than the whole budget are not cached.
    pub fn insert(&mut self, obj: Arc<VersionedObject>) {
        let size = obj.payload.len();
        let key = obj.key.full();
        if let Some(old) = self.entries.pop(&key) {
            self.used -= old.payload.len();
        }
        if size > self.capacity {
            return;
        }
        while self.used + size > self.capacity {
            match self.entries.pop_lru() {
                Some((_, evicted)) => self.used -= evicted.payload.len(),
                None => break,
            }
        }
        self.used += size;
        self.entries.put(key, obj);
    }

    /// Looks up a full key, refreshing its recency on a hit.
    pub fn lookup(&mut self, full_key: &str) -> Option<Arc<VersionedObject>> {
        self.entries.get(full_key).cloned()
    }

    pub fn remove(&mut self, full_key: &str) {
        if let Some(old) = self.entries.pop(full_key) {
            self.used -= old.payload.len();
        }
    }
}
