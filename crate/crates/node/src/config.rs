//! Node configuration, loaded from JSON.
//!
//! ```json
//! {
//!   "node_id": 1,
//!   "listen": "127.0.0.1:7101",
//!   "nodes": [
//!     {"id": 1, "addr": "127.0.0.1:7101"},
//!     {"id": 2, "addr": "127.0.0.1:7102"},
//!     {"id": 3, "addr": "127.0.0.1:7103"}
//!   ],
//!   "pools": [
//!     {"path": "/vola", "persistence": "volatile", "replication_factor": 3,
//!      "shard_count": 1, "shard_members": [[1, 2, 3]]}
//!   ],
//!   "dfg": "pipeline.json",
//!   "log_dir": "/var/lib/kvflow/n1"
//! }
//! ```
//!
//! `nodes` lists every node, this one included. `shard_members[i]` is the
//! ordered member list of shard `i`. The remaining fields are optional; see
//! [`ServiceConfig`] for their defaults.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use kvflow_core::{Error, PoolDescriptor, PoolRegistry, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeAddr {
    pub id: u32,
    pub addr: SocketAddr,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    #[serde(flatten)]
    pub descriptor: PoolDescriptor,
    pub shard_members: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub node_id: u32,
    pub listen: SocketAddr,
    pub nodes: Vec<NodeAddr>,
    pub pools: Vec<PoolConfig>,
    #[serde(default)]
    pub dfg: Option<PathBuf>,
    pub log_dir: PathBuf,
    /// Fast-path worker threads.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_queue_bound")]
    pub queue_bound: usize,
    /// In-flight puts per shard for clients this node creates.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Byte budget of the cache for objects homed on other nodes.
    #[serde(default = "default_cache_bytes")]
    pub cache_bytes: usize,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_ms: u64,
    #[serde(default = "default_failure_timeout_ms")]
    pub failure_timeout_ms: u64,
    #[serde(default = "default_bootstrap_timeout_ms")]
    pub bootstrap_timeout_ms: u64,
    #[serde(default = "default_commit_timeout_ms")]
    pub commit_timeout_ms: u64,
    #[serde(default = "default_flush_interval_us")]
    pub log_flush_interval_us: u64,
    /// Extra delay before each log sync, for simulating slow storage.
    #[serde(default)]
    pub log_sync_delay_us: u64,
    /// Keep the order of every delivery for inspection.
    #[serde(default)]
    pub trace_deliveries: bool,
    /// Per-subscriber notification buffer; a subscriber that falls this far
    /// behind is disconnected.
    #[serde(default = "default_subscriber_buffer")]
    pub subscriber_buffer: usize,
}

fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(2)
        .max(2)
}
fn default_queue_bound() -> usize {
    kvflow_core::fastpath::DEFAULT_QUEUE_BOUND
}
fn default_window() -> usize {
    3
}
fn default_cache_bytes() -> usize {
    64 << 20
}
fn default_heartbeat_ms() -> u64 {
    500
}
fn default_failure_timeout_ms() -> u64 {
    2000
}
fn default_bootstrap_timeout_ms() -> u64 {
    10_000
}
fn default_commit_timeout_ms() -> u64 {
    10_000
}
fn default_flush_interval_us() -> u64 {
    1000
}
fn default_subscriber_buffer() -> usize {
    1 << 16
}

impl ServiceConfig {
    /// A config with every optional field at its default.
    pub fn new(
        node_id: u32,
        listen: SocketAddr,
        nodes: Vec<NodeAddr>,
        pools: Vec<PoolConfig>,
        log_dir: PathBuf,
    ) -> Self {
        ServiceConfig {
            node_id,
            listen,
            nodes,
            pools,
            dfg: None,
            log_dir,
            workers: default_workers(),
            queue_bound: default_queue_bound(),
            window: default_window(),
            cache_bytes: default_cache_bytes(),
            heartbeat_ms: default_heartbeat_ms(),
            failure_timeout_ms: default_failure_timeout_ms(),
            bootstrap_timeout_ms: default_bootstrap_timeout_ms(),
            commit_timeout_ms: default_commit_timeout_ms(),
            log_flush_interval_us: default_flush_interval_us(),
            log_sync_delay_us: 0,
            trace_deliveries: false,
            subscriber_buffer: default_subscriber_buffer(),
        }
    }

    pub fn from_json(json: &[u8]) -> Result<Self> {
        let cfg: ServiceConfig =
            serde_json::from_slice(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&bytes)?;
        // a relative DFG path is relative to the config file
        if let (Some(dfg), Some(dir)) = (&cfg.dfg, path.parent()) {
            if dfg.is_relative() {
                cfg.dfg = Some(dir.join(dfg));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Error::Config(m);
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(cfg(format!("duplicate node id {}", n.id)));
            }
        }
        if !ids.contains(&self.node_id) {
            return Err(cfg(format!(
                "node_id {} is not listed in nodes",
                self.node_id
            )));
        }
        if self.workers == 0 || self.queue_bound == 0 || self.window == 0 {
            return Err(cfg(
                "workers, queue_bound and window must be positive".into()
            ));
        }
        self.registry()?;
        for p in &self.pools {
            let d = &p.descriptor;
            if p.shard_members.len() != d.shard_count as usize {
                return Err(cfg(format!(
                    "pool {}: {} shard member lists for {} shards",
                    d.path,
                    p.shard_members.len(),
                    d.shard_count
                )));
            }
            for (i, members) in p.shard_members.iter().enumerate() {
                let distinct: HashSet<_> = members.iter().collect();
                if distinct.len() != members.len() {
                    return Err(cfg(format!("pool {} shard {i}: repeated member", d.path)));
                }
                if members.len() != d.replication_factor as usize {
                    return Err(cfg(format!(
                        "pool {} shard {i}: {} members for replication factor {}",
                        d.path,
                        members.len(),
                        d.replication_factor
                    )));
                }
                if let Some(m) = members.iter().find(|m| !ids.contains(m)) {
                    return Err(cfg(format!("pool {} shard {i}: unknown node {m}", d.path)));
                }
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<PoolRegistry> {
        PoolRegistry::from_pools(self.pools.iter().map(|p| p.descriptor.clone()))
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn addr_of(&self, id: u32) -> Option<SocketAddr> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.addr)
    }

    pub fn heartbeat(&self) -> Duration {
        Duration::from_millis(self.heartbeat_ms)
    }

    pub fn failure_timeout(&self) -> Duration {
        Duration::from_millis(self.failure_timeout_ms)
    }

    pub fn bootstrap_timeout(&self) -> Duration {
        Duration::from_millis(self.bootstrap_timeout_ms)
    }

    pub fn commit_timeout(&self) -> Duration {
        Duration::from_millis(self.commit_timeout_ms)
    }
}
