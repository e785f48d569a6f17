//! Pipeline descriptors and the lambda-facing store API.
//!
//! A DFG is a JSON document:
//!
//! ```json
//! {
//!   "pools": ["/sf/filter", "/sf/bcs", "/sf/store"],
//!   "vertices": [
//!     {"id": "filter", "lambda": "filter", "prefix": "/sf/filter",
//!      "dispatch_policy": "fifo_by_key", "execution": "one_member"}
//!   ],
//!   "edges": [
//!     {"from": "filter", "to": "/sf/bcs", "put_type": "trigger"}
//!   ]
//! }
//! ```
//!
//! `pools` lists the pools the graph depends on; each must be registered.
//! `dispatch_policy` defaults to `round_robin`, `execution` to `one_member`
//! and `put_type` to `trigger`. Unknown fields are rejected.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::fastpath::{
    DispatchPolicy, FastPath, LambdaRegistration, ObjectRef, Upcall, UpcallEvent,
};
use crate::model::{is_path_prefix, validate_path};
use crate::shard::VersionedObject;
use crate::{stable_hash, Error, ObjectKey, Persistence, PoolRegistry, Result, Version};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfgDescriptor {
    #[serde(default)]
    pub pools: Vec<String>,
    #[serde(default)]
    pub vertices: Vec<Vertex>,
    #[serde(default)]
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vertex {
    pub id: String,
    pub lambda: String,
    pub prefix: String,
    #[serde(default)]
    pub dispatch_policy: DispatchPolicy,
    #[serde(default)]
    pub execution: Execution,
}

/// Which members of a shard run the vertex for a stored object.
///
/// Every member of a shard delivers each put it receives to its own fast
/// path. `OneMember` picks a single member per object so the lambda runs
/// once per put; `AllMembers` runs it everywhere, which suits vertices that
/// act on member-local state (such as pushing to locally attached
/// subscribers). Triggered objects reach only one member and always run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    #[default]
    OneMember,
    AllMembers,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub put_type: PutType,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PutType {
    #[default]
    Trigger,
    Volatile,
    Persistent,
}

impl PutType {
    fn persistence(self) -> Option<Persistence> {
        match self {
            PutType::Trigger => None,
            PutType::Volatile => Some(Persistence::Volatile),
            PutType::Persistent => Some(Persistence::Persistent),
        }
    }
}

/// Parses and validates a DFG in one step.
pub fn load_dfg(
    json: &[u8],
    pools: &PoolRegistry,
    lambdas: &LambdaRegistry,
) -> Result<DfgDescriptor> {
    let dfg = DfgDescriptor::parse(json)?;
    dfg.validate(pools, lambdas)?;
    Ok(dfg)
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        field: field.into(),
        message: message.into(),
    }
}

impl DfgDescriptor {
    /// Parses the JSON form without checking it against any registry.
    pub fn parse(json: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(json);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            schema(
                if field == "." {
                    "<root>".to_string()
                } else {
                    field
                },
                e.into_inner().to_string(),
            )
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn vertex(&self, id: &str) -> Option<&Vertex> {
        self.vertices.iter().find(|v| v.id == id)
    }

    pub fn out_edges<'a>(&'a self, vertex_id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from == vertex_id)
    }

    pub fn validate(&self, pools: &PoolRegistry, lambdas: &LambdaRegistry) -> Result<()> {
        for (i, p) in self.pools.iter().enumerate() {
            validate_path(p).map_err(|m| schema(format!("pools[{i}]"), m))?;
            if pools.get(p).is_none() {
                return Err(Error::UnknownPool(p.clone()));
            }
        }
        let mut ids = HashSet::new();
        for (i, v) in self.vertices.iter().enumerate() {
            if v.id.is_empty() {
                return Err(schema(format!("vertices[{i}].id"), "empty vertex id"));
            }
            if !ids.insert(v.id.as_str()) {
                return Err(schema(
                    format!("vertices[{i}].id"),
                    format!("duplicate vertex id {:?}", v.id),
                ));
            }
            validate_path(&v.prefix).map_err(|m| schema(format!("vertices[{i}].prefix"), m))?;
            if pools.resolve(&v.prefix).is_none() {
                return Err(Error::UnknownPool(v.prefix.clone()));
            }
            if !lambdas.contains(&v.lambda) {
                return Err(Error::UnknownLambda(v.lambda.clone()));
            }
        }
        for (i, e) in self.edges.iter().enumerate() {
            let Some(from) = self.vertex(&e.from) else {
                return Err(schema(
                    format!("edges[{i}].from"),
                    format!("no vertex {:?}", e.from),
                ));
            };
            validate_path(&e.to).map_err(|m| schema(format!("edges[{i}].to"), m))?;
            let Some(pool) = pools.resolve(&e.to) else {
                return Err(Error::UnknownPool(e.to.clone()));
            };
            // anything emitted under `to` would land back on the source vertex
            if is_path_prefix(&from.prefix, &e.to) {
                return Err(schema(
                    format!("edges[{i}]"),
                    format!("self-loop on vertex {:?}", from.id),
                ));
            }
            if let Some(p) = e.put_type.persistence() {
                if p != pool.persistence {
                    return Err(schema(
                        format!("edges[{i}].put_type"),
                        format!("pool {:?} is {:?}", pool.path, pool.persistence),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Store operations a lambda may call. A node supplies the implementation.
pub trait StoreApi: Send + Sync {
    fn pools(&self) -> &PoolRegistry;
    /// Put into the key's pool with that pool's persistence.
    fn put(&self, key: &ObjectKey, payload: Bytes) -> Result<Version>;
    fn trigger_put(&self, key: &ObjectKey, payload: Bytes) -> Result<()>;
    fn get_current(&self, key: &ObjectKey) -> Result<VersionedObject>;
    fn get_by_version(&self, key: &ObjectKey, version: u64) -> Result<VersionedObject>;
    fn get_by_time(&self, key: &ObjectKey, t_us: u64) -> Result<VersionedObject>;
    /// This node's position among the members of the key's home shard, and
    /// the member count. `None` when this node is not a member.
    fn placement(&self, key: &ObjectKey) -> Option<(usize, usize)>;
    /// Whether this node is a member of any shard of `pool_path`.
    fn hosts_pool(&self, pool_path: &str) -> bool;
}

pub trait Lambda: Send + Sync {
    fn invoke(&self, ctx: &LambdaContext<'_>) -> Result<()>;
}

impl<F> Lambda for F
where
    F: Fn(&LambdaContext<'_>) -> Result<()> + Send + Sync,
{
    fn invoke(&self, ctx: &LambdaContext<'_>) -> Result<()> {
        self(ctx)
    }
}

/// Process-local table of callables keyed by lambda id.
#[derive(Clone, Default)]
pub struct LambdaRegistry {
    table: HashMap<String, Arc<dyn Lambda>>,
}

impl LambdaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, lambda: Arc<dyn Lambda>) {
        self.table.insert(id.to_string(), lambda);
    }

    pub fn with(mut self, id: &str, lambda: impl Lambda + 'static) -> Self {
        self.insert(id, Arc::new(lambda));
        self
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn Lambda>> {
        self.table.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.table.contains_key(id)
    }
}

/// Out-edges of one vertex, resolved once at instantiation.
#[derive(Clone, Debug)]
struct OutEdge {
    to: String,
    put_type: PutType,
}

struct VertexRuntime {
    vertex: Vertex,
    lambda: Arc<dyn Lambda>,
    out: Vec<OutEdge>,
    store: Arc<dyn StoreApi>,
}

impl VertexRuntime {
    fn runs_here(&self, object: &ObjectRef) -> bool {
        let ObjectRef::Stored(o) = object else {
            return true;
        };
        if self.vertex.execution == Execution::AllMembers {
            return true;
        }
        let Some((mine, members)) = self.store.placement(&o.key) else {
            return false;
        };
        let pick = match self.vertex.dispatch_policy {
            DispatchPolicy::RoundRobin => o.version.shard_seq,
            DispatchPolicy::FifoByKey => stable_hash(o.key.full().as_bytes()).value(),
        };
        (pick % members.max(1) as u64) as usize == mine
    }
}

impl Upcall for VertexRuntime {
    fn upcall(&self, event: &UpcallEvent) -> std::result::Result<(), String> {
        if !self.runs_here(&event.object) {
            return Ok(());
        }
        let ctx = LambdaContext { rt: self, event };
        self.lambda.invoke(&ctx).map_err(|e| e.to_string())
    }
}

/// What a lambda sees during one upcall. It borrows the upcall event, so it
/// cannot outlive the call.
pub struct LambdaContext<'a> {
    rt: &'a VertexRuntime,
    event: &'a UpcallEvent,
}

impl LambdaContext<'_> {
    pub fn vertex_id(&self) -> &str {
        &self.rt.vertex.id
    }

    pub fn event(&self) -> &UpcallEvent {
        self.event
    }

    pub fn input(&self) -> &ObjectRef {
        &self.event.object
    }

    pub fn key(&self) -> &ObjectKey {
        self.event.object.key()
    }

    pub fn payload(&self) -> &Bytes {
        self.event.object.payload()
    }

    fn parse(&self, raw: &str) -> Result<ObjectKey> {
        self.rt.store.pools().parse_key(raw)
    }

    pub fn get_current(&self, key: &str) -> Result<VersionedObject> {
        self.rt.store.get_current(&self.parse(key)?)
    }

    pub fn get_by_version(&self, key: &str, version: u64) -> Result<VersionedObject> {
        self.rt.store.get_by_version(&self.parse(key)?, version)
    }

    pub fn get_by_time(&self, key: &str, t_us: u64) -> Result<VersionedObject> {
        self.rt.store.get_by_time(&self.parse(key)?, t_us)
    }

    pub fn put(&self, key: &str, payload: Bytes) -> Result<Version> {
        self.rt.store.put(&self.parse(key)?, payload)
    }

    pub fn trigger_put(&self, key: &str, payload: Bytes) -> Result<()> {
        self.rt.store.trigger_put(&self.parse(key)?, payload)
    }

    /// Sends `payload` along every out-edge as `<edge prefix>/<suffix>`.
    /// Stops at the first failing edge.
    pub fn emit(&self, payload: Bytes, suffix: &str) -> Result<()> {
        if self.rt.out.is_empty() {
            return Err(Error::NoOutEdges(self.rt.vertex.id.clone()));
        }
        for edge in &self.rt.out {
            let key = self.parse(&format!("{}/{}", edge.to, suffix))?;
            match edge.put_type {
                PutType::Trigger => self.rt.store.trigger_put(&key, payload.clone())?,
                PutType::Volatile | PutType::Persistent => {
                    self.rt.store.put(&key, payload.clone())?;
                }
            }
        }
        Ok(())
    }
}

/// Registers every vertex whose pool this node hosts. Returns the new
/// registrations.
///
/// A failed registration leaves earlier vertices of the same DFG registered.
pub fn instantiate(
    dfg: &DfgDescriptor,
    lambdas: &LambdaRegistry,
    fastpath: &FastPath,
    store: Arc<dyn StoreApi>,
) -> Result<Vec<Arc<LambdaRegistration>>> {
    let mut regs = Vec::new();
    for v in &dfg.vertices {
        let lambda = lambdas
            .get(&v.lambda)
            .ok_or_else(|| Error::UnknownLambda(v.lambda.clone()))?;
        let pool = store
            .pools()
            .resolve(&v.prefix)
            .ok_or_else(|| Error::UnknownPool(v.prefix.clone()))?;
        if !store.hosts_pool(&pool.path) {
            continue;
        }
        let out = dfg
            .out_edges(&v.id)
            .map(|e| OutEdge {
                to: e.to.clone(),
                put_type: e.put_type,
            })
            .collect();
        let rt = VertexRuntime {
            vertex: v.clone(),
            lambda: Arc::clone(lambda),
            out,
            store: Arc::clone(&store),
        };
        regs.push(fastpath.register(LambdaRegistration::new(
            &v.lambda,
            &v.prefix,
            v.dispatch_policy,
            Arc::new(rt),
        ))?);
    }
    Ok(regs)
}
