use std::collections::HashMap;
use std::sync::Arc;

use super::LambdaRegistration;
use crate::model::components;

/// Path-component trie of lambda registrations.
///
/// Children are `Arc`ed so an insert copies only the nodes along one path;
/// the dispatcher keeps reading the previous version until the new one is
/// published.
#[derive(Clone, Default)]
pub struct PrefixTrie {
    root: Arc<Node>,
    len: usize,
}

#[derive(Clone, Default)]
struct Node {
    children: HashMap<String, Arc<Node>>,
    regs: Vec<Arc<LambdaRegistration>>,
}

impl PrefixTrie {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, lambda_id: &str, prefix: &str) -> bool {
        let mut node = &self.root;
        for comp in components(prefix) {
            match node.children.get(comp) {
                Some(n) => node = n,
                None => return false,
            }
        }
        node.regs.iter().any(|r| r.lambda_id == lambda_id)
    }

    pub fn insert(&mut self, reg: Arc<LambdaRegistration>) {
        let mut node = Arc::make_mut(&mut self.root);
        for comp in components(&reg.prefix) {
            let child = node.children.entry(comp.to_string()).or_default();
            node = Arc::make_mut(child);
        }
        node.regs.push(reg);
        self.len += 1;
    }

    /// Registrations bound to any component-wise prefix of `path`,
    /// shortest prefix first.
    pub fn matches(&self, path: &str) -> Vec<Arc<LambdaRegistration>> {
        let mut out = Vec::new();
        self.for_each_match(path, |r| out.push(Arc::clone(r)));
        out
    }

    /// Visits matches without allocating a result vector.
    pub fn for_each_match(&self, path: &str, mut f: impl FnMut(&Arc<LambdaRegistration>)) {
        let mut node = &self.root;
        node.regs.iter().for_each(&mut f);
        for comp in components(path) {
            match node.children.get(comp) {
                Some(n) => node = n,
                None => return,
            }
            node.regs.iter().for_each(&mut f);
        }
    }

    pub fn registrations(&self) -> Vec<Arc<LambdaRegistration>> {
        fn walk(n: &Node, out: &mut Vec<Arc<LambdaRegistration>>) {
            out.extend(n.regs.iter().cloned());
            for c in n.children.values() {
                walk(c, out);
            }
        }
        let mut out = Vec::with_capacity(self.len);
        walk(&self.root, &mut out);
        out
    }
}
