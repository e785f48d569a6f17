//! Cluster membership: static shard member lists plus the set of live nodes.

use std::collections::BTreeSet;
use std::net::SocketAddr;

use kvflow_core::{map_key_to_shard, Error, ObjectKey, PoolRegistry, Result};
use parking_lot::RwLock;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::config::{NodeAddr, PoolConfig, ServiceConfig};
use crate::wire::ShardId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewNode {
    pub id: u32,
    pub addr: SocketAddr,
    pub live: bool,
}

/// Snapshot of the membership view, as served to clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterView {
    pub view_id: u64,
    pub nodes: Vec<ViewNode>,
    pub pools: Vec<PoolConfig>,
}

impl ClusterView {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Protocol(format!("bad view: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("view serializes")
    }

    pub fn registry(&self) -> Result<PoolRegistry> {
        PoolRegistry::from_pools(self.pools.iter().map(|p| p.descriptor.clone()))
    }

    pub fn addr_of(&self, id: u32) -> Option<SocketAddr> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.addr)
    }

    pub fn is_live(&self, id: u32) -> bool {
        self.nodes.iter().any(|n| n.id == id && n.live)
    }

    /// Configured members of a shard, live or not.
    pub fn members(&self, shard: &ShardId) -> &[u32] {
        self.pools
            .iter()
            .find(|p| p.descriptor.path == shard.pool)
            .and_then(|p| p.shard_members.get(shard.shard as usize))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn live_members(&self, shard: &ShardId) -> Vec<u32> {
        self.members(shard)
            .iter()
            .copied()
            .filter(|m| self.is_live(*m))
            .collect()
    }

    /// The live member with the lowest id.
    pub fn sequencer(&self, shard: &ShardId) -> Option<u32> {
        self.live_members(shard).into_iter().min()
    }

    pub fn home(&self, key: &ObjectKey) -> Result<ShardId> {
        let pool = self
            .pools
            .iter()
            .find(|p| p.descriptor.path == key.pool_path())
            .ok_or_else(|| Error::NoSuchPool(key.full()))?;
        Ok(ShardId::new(
            key.pool_path(),
            map_key_to_shard(key, &pool.descriptor),
        ))
    }

    /// A uniformly random live member of the key's home shard.
    pub fn route_get(&self, key: &ObjectKey) -> Result<u32> {
        let shard = self.home(key)?;
        self.live_members(&shard)
            .choose(&mut rand::rng())
            .copied()
            .ok_or_else(|| Error::ShardUnavailable(shard.to_string()))
    }

    /// Every shard of every pool that `node` is a member of.
    pub fn shards_of(&self, node: u32) -> Vec<ShardId> {
        let mut out = Vec::new();
        for p in &self.pools {
            for (i, members) in p.shard_members.iter().enumerate() {
                if members.contains(&node) {
                    out.push(ShardId::new(&p.descriptor.path, i as u32));
                }
            }
        }
        out
    }
}

/// This node's live view. Starts at view 1 with every node live; each
/// detected failure removes one node and bumps the view id.
pub struct Membership {
    me: u32,
    view: RwLock<ClusterView>,
}

impl Membership {
    pub fn new(config: &ServiceConfig) -> Self {
        let nodes = config
            .nodes
            .iter()
            .map(|NodeAddr { id, addr }| ViewNode {
                id: *id,
                addr: *addr,
                live: true,
            })
            .collect();
        Membership {
            me: config.node_id,
            view: RwLock::new(ClusterView {
                view_id: 1,
                nodes,
                pools: config.pools.clone(),
            }),
        }
    }

    pub fn me(&self) -> u32 {
        self.me
    }

    pub fn snapshot(&self) -> ClusterView {
        self.view.read().clone()
    }

    pub fn view_id(&self) -> u64 {
        self.view.read().view_id
    }

    pub fn is_live(&self, id: u32) -> bool {
        self.view.read().is_live(id)
    }

    pub fn live_nodes(&self) -> BTreeSet<u32> {
        self.view
            .read()
            .nodes
            .iter()
            .filter(|n| n.live)
            .map(|n| n.id)
            .collect()
    }

    pub fn live_members(&self, shard: &ShardId) -> Vec<u32> {
        self.view.read().live_members(shard)
    }

    pub fn sequencer(&self, shard: &ShardId) -> Option<u32> {
        self.view.read().sequencer(shard)
    }

    pub fn route_get(&self, key: &ObjectKey) -> Result<u32> {
        self.view.read().route_get(key)
    }

    /// Removes `id` from the view. Returns false if it was already gone.
    pub fn mark_failed(&self, id: u32) -> bool {
        let mut v = self.view.write();
        match v.nodes.iter_mut().find(|n| n.id == id && n.live) {
            Some(n) => {
                n.live = false;
                v.view_id += 1;
                true
            }
            None => false,
        }
    }
}
