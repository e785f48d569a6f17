//! Node daemon, peer replication and client SDK for the kvflow store.
//!
//! - [`wire`]: frame layouts shared by clients and nodes
//! - [`config`]: the JSON node config
//! - [`view`]: membership and routing
//! - [`replication`]: per-shard ordered, acknowledged delivery
//! - [`server`]: the node itself
//! - [`client`]: the SDK
//! - [`cms`]: topics and subscriptions
//! - [`cluster`]: in-process loopback clusters

pub mod client;
pub mod cluster;
pub mod cms;
pub mod config;
pub mod replication;
pub mod server;
pub mod view;
pub mod wire;

pub use client::{Client, Notification, ObjectReply, PendingPut, PutReply, Subscription};
pub use cluster::{ClusterSpec, LocalCluster};
pub use config::{NodeAddr, PoolConfig, ServiceConfig};
pub use server::{Node, NodeOptions};
pub use view::ClusterView;
pub use wire::{ServerTiming, ShardId};
