use std::collections::HashMap;

use crate::model::Version;

/// One durable record, as seen by the indexes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub key: String,
    pub version: Version,
    pub offset: u64,
}

/// Time-sorted secondary index: `(timestamp_us, shard_seq)` order, one entry
/// per durable record.
#[derive(Debug, Default)]
pub struct TemporalIndex {
    entries: Vec<(u64, u64, u64, String)>,
}

impl TemporalIndex {
    pub fn insert(&mut self, e: &IndexEntry) {
        let sort_key = (e.version.timestamp_us, e.version.shard_seq);
        let at = self
            .entries
            .partition_point(|(ts, seq, _, _)| (*ts, *seq) <= sort_key);
        self.entries.insert(
            at,
            (
                e.version.timestamp_us,
                e.version.shard_seq,
                e.offset,
                e.key.clone(),
            ),
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records with `lo <= timestamp_us <= hi`, in time order, as
    /// `(timestamp_us, shard_seq, offset, key)`.
    pub fn window(&self, lo: u64, hi: u64) -> &[(u64, u64, u64, String)] {
        let a = self.entries.partition_point(|e| e.0 < lo);
        let b = self.entries.partition_point(|e| e.0 <= hi);
        &self.entries[a..b.max(a)]
    }

    pub fn is_sorted(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| (w[0].0, w[0].1) <= (w[1].0, w[1].1))
    }
}

/// Per-key version chains: for each key, `(version, offset)` in version order.
#[derive(Debug, Default)]
pub struct ChainIndex {
    chains: HashMap<String, Vec<(Version, u64)>>,
}

impl ChainIndex {
    pub fn insert(&mut self, e: &IndexEntry) {
        let chain = self.chains.entry(e.key.clone()).or_default();
        debug_assert_eq!(chain.len() as u64, e.version.per_key_version);
        chain.push((e.version, e.offset));
    }

    pub fn chain(&self, key: &str) -> Option<&[(Version, u64)]> {
        self.chains.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.chains.keys()
    }

    /// Highest version of `key` with `timestamp_us <= t`.
    /// `Ok(None)` when the key exists but all its versions are later than `t`.
    pub fn version_at(&self, key: &str, t: u64) -> Option<Option<(Version, u64)>> {
        let chain = self.chains.get(key)?;
        let n = chain.partition_point(|(v, _)| v.timestamp_us <= t);
        Some(n.checked_sub(1).map(|i| chain[i]))
    }
}
