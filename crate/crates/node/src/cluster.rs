//! In-process clusters on loopback, for tests and benches.

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::thread;

use kvflow_core::dfg::{DfgDescriptor, LambdaRegistry};
use kvflow_core::{Error, PoolDescriptor, Result};

use crate::client::Client;
use crate::config::{NodeAddr, PoolConfig, ServiceConfig};
use crate::server::{Node, NodeOptions};

type ConfigTweak = Box<dyn Fn(&mut ServiceConfig)>;

/// Builds configs for `n` nodes with ids `1..=n` on ephemeral ports.
pub struct ClusterSpec {
    pub nodes: u32,
    pub pools: Vec<PoolConfig>,
    pub dfg: Option<DfgDescriptor>,
    pub log_root: PathBuf,
    /// Applied to every node's config before start.
    pub tweak: Option<ConfigTweak>,
}

impl ClusterSpec {
    pub fn new(nodes: u32, log_root: &Path) -> Self {
        ClusterSpec {
            nodes,
            pools: Vec::new(),
            dfg: None,
            log_root: log_root.to_path_buf(),
            tweak: None,
        }
    }

    /// Adds a pool whose shard `i` is replicated on nodes `i*rf+1 ..` wrapping
    /// around the cluster.
    pub fn pool(mut self, descriptor: PoolDescriptor) -> Self {
        let rf = descriptor.replication_factor;
        let shard_members = (0..descriptor.shard_count)
            .map(|s| (0..rf).map(|r| (s * rf + r) % self.nodes + 1).collect())
            .collect();
        self.pools.push(PoolConfig {
            descriptor,
            shard_members,
        });
        self
    }

    pub fn pool_on(mut self, descriptor: PoolDescriptor, shard_members: Vec<Vec<u32>>) -> Self {
        self.pools.push(PoolConfig {
            descriptor,
            shard_members,
        });
        self
    }

    pub fn dfg(mut self, dfg: DfgDescriptor) -> Self {
        self.dfg = Some(dfg);
        self
    }

    pub fn tweak(mut self, f: impl Fn(&mut ServiceConfig) + 'static) -> Self {
        self.tweak = Some(Box::new(f));
        self
    }

    /// One config per node plus the listeners they should serve on.
    pub fn configs(&self) -> Result<Vec<(ServiceConfig, TcpListener)>> {
        let listeners = (0..self.nodes)
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<std::io::Result<Vec<_>>>()?;
        let addrs: Vec<SocketAddr> = listeners
            .iter()
            .map(|l| l.local_addr())
            .collect::<std::io::Result<_>>()?;
        let nodes: Vec<NodeAddr> = addrs
            .iter()
            .enumerate()
            .map(|(i, a)| NodeAddr {
                id: i as u32 + 1,
                addr: *a,
            })
            .collect();
        Ok(listeners
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let mut cfg = ServiceConfig::new(
                    i as u32 + 1,
                    addrs[i],
                    nodes.clone(),
                    self.pools.clone(),
                    self.log_root.clone(),
                );
                cfg.workers = 2;
                if let Some(t) = &self.tweak {
                    t(&mut cfg);
                }
                (cfg, l)
            })
            .collect())
    }
}

/// Running nodes, indexed by `id - 1`. A killed node leaves a `None`.
pub struct LocalCluster {
    nodes: Vec<Option<Node>>,
}

impl LocalCluster {
    /// Starts every node concurrently; each takes the lambdas produced by
    /// `lambdas(node_id)`.
    pub fn start(
        spec: ClusterSpec,
        lambdas: impl Fn(u32) -> LambdaRegistry,
    ) -> Result<LocalCluster> {
        let configs = spec.configs()?;
        let handles: Vec<_> = configs
            .into_iter()
            .map(|(cfg, listener)| {
                let opts = NodeOptions {
                    lambdas: lambdas(cfg.node_id),
                    dfg: spec.dfg.clone(),
                    listener: Some(listener),
                };
                thread::spawn(move || Node::start(cfg, opts))
            })
            .collect();
        let mut nodes = Vec::new();
        let mut first_err = None;
        for h in handles {
            match h
                .join()
                .map_err(|_| Error::Config("node start panicked".into()))
                .and_then(|r| r)
            {
                Ok(n) => nodes.push(Some(n)),
                Err(e) => {
                    first_err.get_or_insert(e);
                    nodes.push(None);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(LocalCluster { nodes }),
        }
    }

    pub fn node(&self, id: u32) -> &Node {
        self.nodes[id as usize - 1]
            .as_ref()
            .expect("node is running")
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().flatten()
    }

    pub fn client(&self) -> Result<Client> {
        let first = self
            .nodes()
            .next()
            .ok_or_else(|| Error::Config("no running node".into()))?;
        Client::connect(first.addr())
    }

    pub fn kill(&mut self, id: u32) {
        if let Some(n) = self.nodes[id as usize - 1].take() {
            n.kill();
        }
    }

    pub fn shutdown(mut self) {
        for n in self.nodes.iter_mut().filter_map(Option::take) {
            n.shutdown();
        }
    }
}
