//! Pub/sub on top of the store. A topic is the key `/cms/topics/<topic>`;
//! publishing is a put to that key, and a one-vertex DFG pushes each stored
//! version to the topic's subscribers.
//!
//! The vertex runs `fifo_by_key` so one topic is always handled by one
//! worker, in shard order, while distinct topics proceed concurrently. It
//! runs on every member of the topic's shard, and each member notifies the
//! subscribers connected to it. Subscribers only see messages published
//! after they subscribe.

use std::collections::HashMap;
use std::sync::Arc;

use kvflow_core::dfg::{DfgDescriptor, Execution, LambdaContext, Vertex};
use kvflow_core::fastpath::{DispatchPolicy, ObjectRef};
use kvflow_core::{Error, Result};
use parking_lot::RwLock;

use crate::server::ConnOut;
use crate::wire::Response;

pub const TOPIC_POOL: &str = "/cms/topics";
pub const CMS_LAMBDA: &str = "cms";

/// Key of a topic. Topics are a single path component.
pub fn topic_key(topic: &str) -> Result<String> {
    if topic.is_empty() || topic.contains('/') {
        return Err(Error::MalformedKey {
            key: topic.to_string(),
            reason: "topic must be one path component",
        });
    }
    Ok(format!("{TOPIC_POOL}/{topic}"))
}

/// The CMS graph: one vertex bound to the topic pool.
pub fn cms_dfg() -> DfgDescriptor {
    DfgDescriptor {
        pools: vec![TOPIC_POOL.to_string()],
        vertices: vec![Vertex {
            id: CMS_LAMBDA.to_string(),
            lambda: CMS_LAMBDA.to_string(),
            prefix: TOPIC_POOL.to_string(),
            dispatch_policy: DispatchPolicy::FifoByKey,
            execution: Execution::AllMembers,
        }],
        edges: Vec::new(),
    }
}

struct Subscriber {
    corr: u64,
    out: Arc<ConnOut>,
    /// Latest version applied here when the subscription was made. The
    /// vertex can run after the publish was acked, so older versions may
    /// still arrive and are skipped.
    after: Option<u64>,
}

/// Subscriptions held by one node.
pub struct CmsHub {
    topics: RwLock<HashMap<String, Vec<Subscriber>>>,
    buffer: usize,
}

impl CmsHub {
    pub fn new(buffer: usize) -> Arc<Self> {
        Arc::new(CmsHub {
            topics: RwLock::new(HashMap::new()),
            buffer,
        })
    }

    pub(crate) fn subscribe(
        &self,
        topic: &str,
        corr: u64,
        out: Arc<ConnOut>,
        after: Option<u64>,
    ) -> Result<()> {
        topic_key(topic)?;
        self.topics
            .write()
            .entry(topic.to_string())
            .or_default()
            .push(Subscriber { corr, out, after });
        Ok(())
    }

    pub fn subscriber_count(&self, topic: &str) -> usize {
        self.topics
            .read()
            .get(topic)
            .map_or(0, |s| s.iter().filter(|s| !s.out.is_closed()).count())
    }

    /// Pushes one stored version to every subscriber of `topic`. A
    /// subscriber whose buffer is full is disconnected; others are
    /// unaffected.
    pub fn notify(&self, topic: &str, obj: &ObjectRef) {
        let Some(version) = obj.version() else { return };
        let mut dead = false;
        if let Some(subs) = self.topics.read().get(topic) {
            for s in subs
                .iter()
                .filter(|s| s.after.is_none_or(|a| version.per_key_version > a))
            {
                let frame = Response::Notify {
                    corr: s.corr,
                    topic: topic.to_string(),
                    seq: version.per_key_version,
                    version,
                    payload: obj.payload().clone(),
                }
                .encode();
                if !s.out.try_notify(frame, self.buffer) {
                    dead = true;
                }
            }
        }
        if dead {
            if let Some(subs) = self.topics.write().get_mut(topic) {
                subs.retain(|s| !s.out.is_closed());
            }
        }
    }

    /// The vertex body.
    pub fn lambda(
        self: &Arc<Self>,
    ) -> impl Fn(&LambdaContext<'_>) -> Result<()> + Send + Sync + 'static {
        let hub = Arc::clone(self);
        move |ctx: &LambdaContext<'_>| {
            hub.notify(ctx.key().first_suffix_component(), ctx.input());
            Ok(())
        }
    }
}
