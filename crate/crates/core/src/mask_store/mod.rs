//! Prefix-indexed cache of routing masks and the `.r3mk` trace format.
//!
//! Masks depend only on the prefix that produced them, so the masks of a
//! stored sequence are usable for any of its prefixes. Entries are scoped by
//! a fingerprint of the engine profile and parameters that produced them; a
//! lookup under another fingerprint misses.

mod codec;

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::{MaskTable, RoutingTrace};

pub use codec::{deserialize_trace, serialize_trace, HEADER_LEN};

pub const DEFAULT_CAPACITY: usize = 4096;

/// Fingerprint scoping cached masks to the computation that produced them.
pub fn scope_fingerprint(profile: &crate::engine::EngineProfile, params: &crate::model::PolicyParams) -> u64 {
    crate::rng::hash3(profile.fingerprint(), params.fingerprint(), 0x6d61_736b)
}

#[derive(Debug)]
struct Node {
    parent: Option<usize>,
    token: u32,
    /// `layers * top_k` indices for this position.
    masks: Vec<u16>,
    children: BTreeMap<u32, usize>,
    /// Entries whose path passes through (or ends at) this node.
    refs: u32,
    is_entry: bool,
    last_used: AtomicU64,
}

#[derive(Debug, Default)]
struct Trie {
    nodes: Vec<Option<Node>>,
    free: Vec<usize>,
    roots: BTreeMap<u32, usize>,
}

impl Trie {
    fn node(&self, i: usize) -> &Node {
        self.nodes[i].as_ref().expect("live node")
    }

    fn node_mut(&mut self, i: usize) -> &mut Node {
        self.nodes[i].as_mut().expect("live node")
    }

    fn child(&self, at: Option<usize>, token: u32) -> Option<usize> {
        match at {
            None => self.roots.get(&token).copied(),
            Some(i) => self.node(i).children.get(&token).copied(),
        }
    }

    fn alloc(&mut self, node: Node) -> usize {
        if let Some(i) = self.free.pop() {
            self.nodes[i] = Some(node);
            i
        } else {
            self.nodes.push(Some(node));
            self.nodes.len() - 1
        }
    }
}

/// Routing-mask cache keyed by token prefixes, with whole-entry LRU
/// eviction.
#[derive(Debug)]
pub struct TraceStore {
    layers: usize,
    experts: usize,
    top_k: usize,
    capacity: usize,
    tries: BTreeMap<u64, Trie>,
    /// `(fingerprint, terminal node)` of every entry.
    entries: Vec<(u64, usize)>,
    clock: AtomicU64,
}

impl TraceStore {
    pub fn new(layers: usize, experts: usize, top_k: usize, capacity: usize) -> Self {
        Self {
            layers,
            experts,
            top_k,
            capacity: capacity.max(1),
            tries: BTreeMap::new(),
            entries: Vec::new(),
            clock: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    /// Store `trace` for `tokens` (and, implicitly, all its prefixes).
    pub fn put(&mut self, fingerprint: u64, tokens: &[u32], trace: &RoutingTrace) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("cannot cache an empty prefix".into()));
        }
        if trace.len() != tokens.len() || trace.tokens() != tokens {
            return Err(Error::TraceMismatch);
        }
        let m = trace.masks();
        if m.layers() != self.layers || m.experts() != self.experts || m.top_k() != self.top_k {
            return Err(Error::Invalid("trace shape differs from the store".into()));
        }
        let now = self.tick();
        let trie = self.tries.entry(fingerprint).or_default();
        // validate against existing nodes before touching anything
        let mut at = None;
        for (pos, &tok) in tokens.iter().enumerate() {
            match trie.child(at, tok) {
                Some(i) => {
                    if trie.node(i).masks != m.token(pos) {
                        return Err(Error::ConflictingMasks { position: pos });
                    }
                    at = Some(i);
                }
                None => break,
            }
        }
        let mut at = None;
        let mut path = Vec::with_capacity(tokens.len());
        for (pos, &tok) in tokens.iter().enumerate() {
            let i = match trie.child(at, tok) {
                Some(i) => i,
                None => {
                    let i = trie.alloc(Node {
                        parent: at,
                        token: tok,
                        masks: m.token(pos).to_vec(),
                        children: BTreeMap::new(),
                        refs: 0,
                        is_entry: false,
                        last_used: AtomicU64::new(now),
                    });
                    match at {
                        None => trie.roots.insert(tok, i),
                        Some(p) => trie.node_mut(p).children.insert(tok, i),
                    };
                    i
                }
            };
            path.push(i);
            at = Some(i);
        }
        let terminal = *path.last().expect("nonempty");
        trie.node(terminal).last_used.store(now, Ordering::Relaxed);
        if trie.node(terminal).is_entry {
            return Ok(());
        }
        trie.node_mut(terminal).is_entry = true;
        for &i in &path {
            trie.node_mut(i).refs += 1;
        }
        self.entries.push((fingerprint, terminal));
        while self.entries.len() > self.capacity {
            self.evict_lru();
        }
        Ok(())
    }

    fn evict_lru(&mut self) {
        let (idx, _) = self
            .entries
            .iter()
            .enumerate()
            .min_by_key(|(_, (fp, n))| self.tries[fp].node(*n).last_used.load(Ordering::Relaxed))
            .expect("nonempty");
        let (fp, terminal) = self.entries.swap_remove(idx);
        let trie = self.tries.get_mut(&fp).expect("entry trie");
        trie.node_mut(terminal).is_entry = false;
        let mut at = Some(terminal);
        while let Some(i) = at {
            let n = trie.node_mut(i);
            n.refs -= 1;
            let parent = n.parent;
            if n.refs == 0 {
                let tok = n.token;
                match parent {
                    None => trie.roots.remove(&tok),
                    Some(p) => trie.node_mut(p).children.remove(&tok),
                };
                trie.nodes[i] = None;
                trie.free.push(i);
            }
            at = parent;
        }
        if trie.roots.is_empty() {
            self.tries.remove(&fp);
        }
    }

    /// Masks for the longest stored prefix of `tokens` under `fingerprint`;
    /// an empty trace on a miss.
    pub fn get_longest_prefix(&self, fingerprint: u64, tokens: &[u32]) -> RoutingTrace {
        let mut idx: Vec<u16> = Vec::new();
        let mut matched = 0;
        if let Some(trie) = self.tries.get(&fingerprint) {
            let now = self.tick();
            let mut at = None;
            for &tok in tokens {
                match trie.child(at, tok) {
                    Some(i) => {
                        let n = trie.node(i);
                        n.last_used.store(now, Ordering::Relaxed);
                        idx.extend_from_slice(&n.masks);
                        matched += 1;
                        at = Some(i);
                    }
                    None => break,
                }
            }
        }
        let masks = MaskTable::from_indices(self.layers, self.experts, self.top_k, idx)
            .unwrap_or_else(|_| MaskTable::new(self.layers, self.experts, self.top_k));
        RoutingTrace::new(tokens[..matched].to_vec(), masks).expect("aligned")
    }
}
