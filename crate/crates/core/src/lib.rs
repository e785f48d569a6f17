//! Core of a sharded, versioned object store with event-driven lambda
//! dispatch.
//!
//! - [`model`]: keys, pools, versions, key-to-shard mapping
//! - [`shard`]: the per-member in-memory store with lock-free guarded reads
//! - [`log`]: the persisted per-shard log with a temporal index
//! - [`fastpath`]: prefix-trie matching and upcall worker queues
//! - [`dfg`]: pipeline descriptors and the lambda-facing API

pub mod dfg;
pub mod error;
pub mod fastpath;
pub mod hash;
pub mod log;
pub mod model;
pub mod shard;

pub use error::{Error, Result};
pub use hash::{stable_hash, HashDigest};
pub use model::{
    map_key_to_shard, ObjectKey, Persistence, PoolDescriptor, PoolRegistry, ShardingPolicy, Version,
};
