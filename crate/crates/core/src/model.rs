//! Keys, pools, versions and the key-to-shard mapping.

use std::collections::HashMap;
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::stable_hash;

/// Checks the path rules shared by keys and pool paths: leading '/', no empty
/// component, no '.' or '..' component.
pub fn validate_path(path: &str) -> std::result::Result<(), &'static str> {
    let rest = match path.strip_prefix('/') {
        Some(r) => r,
        None if path.is_empty() => return Err("empty path"),
        None => return Err("path must begin with '/'"),
    };
    if rest.is_empty() {
        return Err("empty path component");
    }
    for comp in rest.split('/') {
        match comp {
            "" => return Err("empty path component"),
            "." | ".." => return Err("'.' and '..' components are not allowed"),
            _ => {}
        }
    }
    Ok(())
}

/// Splits a validated absolute path into components.
pub fn components(path: &str) -> impl Iterator<Item = &str> {
    path.trim_start_matches('/')
        .split('/')
        .filter(|c| !c.is_empty())
}

/// True when `prefix` is a component-wise prefix of `path` (equality counts).
pub fn is_path_prefix(prefix: &str, path: &str) -> bool {
    match path.strip_prefix(prefix) {
        Some("") => true,
        Some(rest) => rest.starts_with('/') || prefix == "/",
        None => false,
    }
}

/// A key inside a pool: `pool_path + '/' + suffix`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectKey {
    pool_path: String,
    suffix: String,
}

impl ObjectKey {
    /// Builds a key from its parts, validating the composed path.
    pub fn compose(pool_path: &str, suffix: &str) -> Result<Self> {
        let full = format!("{pool_path}/{suffix}");
        if suffix.is_empty() {
            return Err(Error::malformed(&full, "empty suffix"));
        }
        validate_path(pool_path).map_err(|r| Error::malformed(&full, r))?;
        validate_path(&full).map_err(|r| Error::malformed(&full, r))?;
        Ok(ObjectKey {
            pool_path: pool_path.to_string(),
            suffix: suffix.to_string(),
        })
    }

    pub fn pool_path(&self) -> &str {
        &self.pool_path
    }

    pub fn suffix(&self) -> &str {
        &self.suffix
    }

    /// First component of the suffix.
    pub fn first_suffix_component(&self) -> &str {
        self.suffix.split('/').next().unwrap_or(&self.suffix)
    }

    pub fn full(&self) -> String {
        format!("{}/{}", self.pool_path, self.suffix)
    }

    /// Number of path components of the full key.
    pub fn depth(&self) -> usize {
        components(&self.pool_path).count() + self.suffix.split('/').count()
    }
}

impl fmt::Debug for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectKey({}/{})", self.pool_path, self.suffix)
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.pool_path, self.suffix)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persistence {
    Volatile,
    Persistent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardingPolicy {
    /// Hash the whole suffix.
    #[default]
    HashFullKey,
    /// Hash only the first suffix component, so related objects co-locate.
    HashFirstSuffixComponent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolDescriptor {
    pub path: String,
    pub persistence: Persistence,
    pub replication_factor: u32,
    pub shard_count: u32,
    #[serde(default)]
    pub sharding_policy: ShardingPolicy,
}

impl PoolDescriptor {
    pub fn new(path: &str, persistence: Persistence) -> Self {
        PoolDescriptor {
            path: path.to_string(),
            persistence,
            replication_factor: 1,
            shard_count: 1,
            sharding_policy: ShardingPolicy::HashFullKey,
        }
    }

    pub fn with_replication(mut self, factor: u32) -> Self {
        self.replication_factor = factor;
        self
    }

    pub fn with_shards(mut self, count: u32) -> Self {
        self.shard_count = count;
        self
    }

    pub fn with_policy(mut self, policy: ShardingPolicy) -> Self {
        self.sharding_policy = policy;
        self
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidPool {
            path: self.path.clone(),
            reason: reason.to_string(),
        };
        validate_path(&self.path).map_err(invalid)?;
        if self.replication_factor == 0 {
            return Err(invalid("replication_factor must be at least 1"));
        }
        if self.shard_count == 0 {
            return Err(invalid("shard_count must be at least 1"));
        }
        Ok(())
    }
}

/// Maps a key to its home shard within `pool`.
pub fn map_key_to_shard(key: &ObjectKey, pool: &PoolDescriptor) -> u32 {
    let hashed = match pool.sharding_policy {
        ShardingPolicy::HashFullKey => key.suffix(),
        ShardingPolicy::HashFirstSuffixComponent => key.first_suffix_component(),
    };
    (stable_hash(hashed.as_bytes()).value() % u64::from(pool.shard_count)) as u32
}

/// Version stamp of one stored object.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Version {
    /// 0 for the first put to a key, +1 per later put.
    pub per_key_version: u64,
    /// Position in the home shard's total order.
    pub shard_seq: u64,
    /// Assigned by the shard sequencer at delivery.
    pub timestamp_us: u64,
}

/// Wall-clock microseconds since the Unix epoch.
pub fn now_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

/// The set of registered pools. Pools may not nest, so every key has at most
/// one owning pool.
#[derive(Clone, Debug, Default)]
pub struct PoolRegistry {
    pools: HashMap<String, PoolDescriptor>,
}

impl PoolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pools(pools: impl IntoIterator<Item = PoolDescriptor>) -> Result<Self> {
        let mut reg = Self::new();
        for p in pools {
            reg.register(p)?;
        }
        Ok(reg)
    }

    pub fn register(&mut self, pool: PoolDescriptor) -> Result<()> {
        pool.validate()?;
        for existing in self.pools.keys() {
            if existing == &pool.path {
                return Err(Error::InvalidPool {
                    path: pool.path,
                    reason: "duplicate pool path".into(),
                });
            }
            if is_path_prefix(existing, &pool.path) || is_path_prefix(&pool.path, existing) {
                return Err(Error::InvalidPool {
                    path: pool.path,
                    reason: format!("nests with registered pool {existing:?}"),
                });
            }
        }
        self.pools.insert(pool.path.clone(), pool);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&PoolDescriptor> {
        self.pools.get(path)
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PoolDescriptor> {
        self.pools.values()
    }

    /// The pool owning `path`: the longest registered pool path that is a
    /// component-wise prefix of it.
    pub fn resolve(&self, path: &str) -> Option<&PoolDescriptor> {
        let mut end = path.len();
        loop {
            let candidate = &path[..end];
            if candidate.is_empty() {
                return None;
            }
            if let Some(p) = self.pools.get(candidate) {
                return Some(p);
            }
            end = candidate.rfind('/')?;
        }
    }

    /// Splits a raw key at its owning pool.
    pub fn parse_key(&self, raw: &str) -> Result<ObjectKey> {
        validate_path(raw).map_err(|r| Error::malformed(raw, r))?;
        let pool = self
            .resolve(raw)
            .ok_or_else(|| Error::NoSuchPool(raw.to_string()))?;
        let suffix = raw[pool.path.len()..].trim_start_matches('/');
        if suffix.is_empty() {
            return Err(Error::malformed(raw, "empty suffix"));
        }
        Ok(ObjectKey {
            pool_path: pool.path.clone(),
            suffix: suffix.to_string(),
        })
    }

    /// Pool and home shard of a key.
    pub fn home_shard(&self, key: &ObjectKey) -> Result<(&PoolDescriptor, u32)> {
        let pool = self
            .get(key.pool_path())
            .ok_or_else(|| Error::NoSuchPool(key.full()))?;
        Ok((pool, map_key_to_shard(key, pool)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn registry(paths: &[&str]) -> PoolRegistry {
        PoolRegistry::from_pools(
            paths
                .iter()
                .map(|p| PoolDescriptor::new(p, Persistence::Volatile)),
        )
        .unwrap()
    }

    #[test]
    fn parse_key_splits_at_pool() {
        let reg = registry(&["/cms/topics"]);
        let k = reg.parse_key("/cms/topics/T").unwrap();
        assert_eq!(k.pool_path(), "/cms/topics");
        assert_eq!(k.suffix(), "T");
        assert_eq!(k.full(), "/cms/topics/T");
    }

    #[test]
    fn parse_key_rejects_bare_pool_path() {
        let reg = registry(&["/cms/topics"]);
        assert!(matches!(
            reg.parse_key("/cms/topics"),
            Err(Error::MalformedKey { .. })
        ));
    }

    #[test]
    fn parse_key_unknown_pool() {
        let reg = registry(&["/cms/topics"]);
        assert!(matches!(
            reg.parse_key("/unknown/x"),
            Err(Error::NoSuchPool(_))
        ));
        // byte prefix but not a component prefix
        assert!(matches!(
            reg.parse_key("/cms/topicsX/a"),
            Err(Error::NoSuchPool(_))
        ));
    }

    #[test]
    fn malformed_keys() {
        let reg = registry(&["/p"]);
        for raw in ["", "p/a", "/p//a", "/p/a/", "/p/./a", "/p/../a"] {
            assert!(
                matches!(reg.parse_key(raw), Err(Error::MalformedKey { .. })),
                "{raw}"
            );
        }
    }

    #[test]
    fn nested_and_duplicate_pools_rejected() {
        let mut reg = registry(&["/a/b"]);
        assert!(reg
            .register(PoolDescriptor::new("/a", Persistence::Volatile))
            .is_err());
        assert!(reg
            .register(PoolDescriptor::new("/a/b/c", Persistence::Volatile))
            .is_err());
        assert!(reg
            .register(PoolDescriptor::new("/a/b", Persistence::Volatile))
            .is_err());
        reg.register(PoolDescriptor::new("/a/bc", Persistence::Volatile))
            .unwrap();
        let bad = PoolDescriptor::new("/x", Persistence::Volatile).with_shards(0);
        assert!(reg.register(bad).is_err());
    }

    #[test]
    fn shard_mapping_examples() {
        let pool = PoolDescriptor::new("/p", Persistence::Volatile);
        let k = ObjectKey::compose("/p", "anything/at/all").unwrap();
        assert_eq!(map_key_to_shard(&k, &pool), 0);

        let grouped = PoolDescriptor::new("/p", Persistence::Volatile)
            .with_shards(16)
            .with_policy(ShardingPolicy::HashFirstSuffixComponent);
        let f1 = ObjectKey::compose("/p", "cam0/f1").unwrap();
        let f2 = ObjectKey::compose("/p", "cam0/f2").unwrap();
        assert_eq!(
            map_key_to_shard(&f1, &grouped),
            map_key_to_shard(&f2, &grouped)
        );

        // 0xaf63dc4c8601ec8c mod 4 == 0
        let four = PoolDescriptor::new("/p", Persistence::Volatile).with_shards(4);
        let a = ObjectKey::compose("/p", "a").unwrap();
        assert_eq!(map_key_to_shard(&a, &four), 0);
    }

    #[test]
    fn path_prefix_is_component_wise() {
        assert!(is_path_prefix("/cms/topics", "/cms/topics/T"));
        assert!(is_path_prefix("/cms/topics", "/cms/topics"));
        assert!(!is_path_prefix("/cms/top", "/cms/topics/T"));
    }

    fn component() -> impl Strategy<Value = String> {
        "[a-z0-9_]{1,6}".prop_filter("dots", |s| s != "." && s != "..")
    }

    fn path(max: usize) -> impl Strategy<Value = String> {
        prop::collection::vec(component(), 1..=max).prop_map(|c| format!("/{}", c.join("/")))
    }

    proptest! {
        #[test]
        fn compose_then_parse_round_trips(pool in path(3), suffix in prop::collection::vec(component(), 1..4)) {
            let suffix = suffix.join("/");
            let reg = registry(&[pool.as_str()]);
            let key = ObjectKey::compose(&pool, &suffix).unwrap();
            prop_assert_eq!(reg.parse_key(&key.full()).unwrap(), key);
        }

        #[test]
        fn resolve_matches_brute_force(pools in prop::collection::vec(path(3), 1..12), key in path(5)) {
            let mut reg = PoolRegistry::new();
            let mut accepted = Vec::new();
            for p in pools {
                if reg.register(PoolDescriptor::new(&p, Persistence::Volatile)).is_ok() {
                    accepted.push(p);
                }
            }
            let brute = accepted
                .iter()
                .filter(|p| is_path_prefix(p, &key))
                .max_by_key(|p| p.len())
                .cloned();
            prop_assert_eq!(reg.resolve(&key).map(|p| p.path.clone()), brute);
        }
    }
}
