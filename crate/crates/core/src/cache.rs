//! Unified multimodal prefix cache.
//!
//! Two pools: encoded image tokens keyed by content hash, and KV prefixes of
//! unified sequences kept in a span-compressed radix tree. Both evict in LRU
//! order; tree nodes held by a user are never evicted.

use crate::types::ContentHash;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CacheError {
    #[error("release of handle {0} that is not held")]
    ReleaseWithoutMatch(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    /// Total token budget split between the two pools.
    pub budget_tokens: u64,
    /// Share of the budget given to the image pool.
    pub image_fraction: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { budget_tokens: 2_000_000, image_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub image_hits: u64,
    pub image_misses: u64,
    pub image_evictions: u64,
    pub encode_tokens_saved: u64,
    pub prefix_lookups: u64,
    pub prefix_hits: u64,
    pub prefix_tokens_matched: u64,
    pub prefix_evictions: u64,
    pub bytes_saved: u64,
}

impl CacheStats {
    pub fn merge(&mut self, o: &CacheStats) {
        self.image_hits += o.image_hits;
        self.image_misses += o.image_misses;
        self.image_evictions += o.image_evictions;
        self.encode_tokens_saved += o.encode_tokens_saved;
        self.prefix_lookups += o.prefix_lookups;
        self.prefix_hits += o.prefix_hits;
        self.prefix_tokens_matched += o.prefix_tokens_matched;
        self.prefix_evictions += o.prefix_evictions;
        self.bytes_saved += o.bytes_saved;
    }
}

#[derive(Debug, Clone)]
struct ImageEntry {
    token_count: u64,
    last_used: f64,
    stamp: u64,
    bytes_estimate: u64,
}

/// Encoded image tokens keyed by content hash.
#[derive(Debug, Clone)]
pub struct ImagePool {
    entries: BTreeMap<ContentHash, ImageEntry>,
    capacity: u64,
    used: u64,
    stamp: u64,
    pub evictions: u64,
}

impl ImagePool {
    pub fn new(capacity: u64) -> Self {
        ImagePool { entries: BTreeMap::new(), capacity, used: 0, stamp: 0, evictions: 0 }
    }

    /// Returns the cached token count on a hit and refreshes its recency.
    pub fn lookup(&mut self, hash: ContentHash, now: f64) -> Option<u64> {
        self.stamp += 1;
        let stamp = self.stamp;
        self.entries.get_mut(&hash).map(|e| {
            e.last_used = now;
            e.stamp = stamp;
            e.token_count
        })
    }

    pub fn contains(&self, hash: ContentHash) -> bool {
        self.entries.contains_key(&hash)
    }

    /// Inserts an encoded image, evicting least-recently-used entries to
    /// make room. Returns false when the image alone exceeds the capacity.
    pub fn insert(&mut self, hash: ContentHash, token_count: u64, bytes_estimate: u64, now: f64) -> bool {
        self.stamp += 1;
        if let Some(e) = self.entries.get_mut(&hash) {
            e.last_used = now;
            e.stamp = self.stamp;
            return true;
        }
        if token_count > self.capacity {
            return false;
        }
        while self.used + token_count > self.capacity {
            let victim = self
                .entries
                .iter()
                .min_by(|a, b| a.1.last_used.total_cmp(&b.1.last_used).then(a.1.stamp.cmp(&b.1.stamp)))
                .map(|(h, _)| *h)
                .expect("over capacity implies a resident entry");
            let e = self.entries.remove(&victim).unwrap();
            self.used -= e.token_count;
            self.evictions += 1;
        }
        self.used += token_count;
        self.entries.insert(hash, ImageEntry { token_count, last_used: now, stamp: self.stamp, bytes_estimate });
        true
    }

    pub fn bytes_of(&self, hash: ContentHash) -> u64 {
        self.entries.get(&hash).map_or(0, |e| e.bytes_estimate)
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

type NodeId = usize;
const ROOT: NodeId = 0;

#[derive(Debug, Clone)]
struct Node {
    parent: NodeId,
    tokens: Vec<u64>,
    children: BTreeMap<u64, NodeId>,
    user_count: u32,
    last_used: f64,
    stamp: u64,
    alive: bool,
}

/// Handle on a matched prefix; must be released exactly once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixHandle {
    pub id: u64,
    pub matched: u64,
}

/// Radix tree over token sequences with per-node user counts.
#[derive(Debug, Clone)]
pub struct PrefixTree {
    nodes: Vec<Node>,
    free: Vec<NodeId>,
    capacity: u64,
    cached: u64,
    stamp: u64,
    next_handle: u64,
    held: BTreeMap<u64, NodeId>,
    pub evictions: u64,
    pub acquired: u64,
    pub released: u64,
}

/// Eviction record, used by tests to compare against a reference model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evicted {
    pub path: Vec<u64>,
    pub len: u64,
}

impl PrefixTree {
    pub fn new(capacity: u64) -> Self {
        let root = Node {
            parent: ROOT,
            tokens: Vec::new(),
            children: BTreeMap::new(),
            user_count: 0,
            last_used: f64::NEG_INFINITY,
            stamp: 0,
            alive: true,
        };
        PrefixTree {
            nodes: vec![root],
            free: Vec::new(),
            capacity,
            cached: 0,
            stamp: 0,
            next_handle: 0,
            held: BTreeMap::new(),
            evictions: 0,
            acquired: 0,
            released: 0,
        }
    }

    pub fn cached_tokens(&self) -> u64 {
        self.cached
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn held_handles(&self) -> usize {
        self.held.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.alive).count() - 1
    }

    fn alloc(&mut self, node: Node) -> NodeId {
        if let Some(id) = self.free.pop() {
            self.nodes[id] = node;
            id
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    /// Splits `id` so that it keeps only its first `at` tokens; the tail
    /// moves to a new child. Returns the (unchanged) id of the head.
    fn split(&mut self, id: NodeId, at: usize) -> NodeId {
        debug_assert!(at > 0 && at < self.nodes[id].tokens.len());
        let tail_tokens = self.nodes[id].tokens.split_off(at);
        let children = std::mem::take(&mut self.nodes[id].children);
        let head = &self.nodes[id];
        let tail = Node {
            parent: id,
            tokens: tail_tokens,
            children,
            user_count: head.user_count,
            last_used: head.last_used,
            stamp: head.stamp,
            alive: true,
        };
        let tail_first = tail.tokens[0];
        let tail_id = self.alloc(tail);
        let grandchildren: Vec<NodeId> = self.nodes[tail_id].children.values().copied().collect();
        for c in grandchildren {
            self.nodes[c].parent = tail_id;
        }
        self.nodes[id].children.insert(tail_first, tail_id);
        // Outstanding handles that ended at `id` now end at the tail.
        for node in self.held.values_mut() {
            if *node == id {
                *node = tail_id;
            }
        }
        id
    }

    /// Walks the longest cached prefix of `seq`, splitting the last node if
    /// the match ends inside it. Returns (matched length, deepest node).
    fn walk(&mut self, seq: &[u64]) -> (usize, NodeId) {
        let mut node = ROOT;
        let mut pos = 0;
        while pos < seq.len() {
            let Some(&child) = self.nodes[node].children.get(&seq[pos]) else { break };
            let edge = &self.nodes[child].tokens;
            let common = edge.iter().zip(&seq[pos..]).take_while(|(a, b)| a == b).count();
            pos += common;
            if common < edge.len() {
                self.split(child, common);
                node = child;
                break;
            }
            node = child;
        }
        (pos, node)
    }

    fn touch_path(&mut self, mut node: NodeId, now: f64) {
        self.stamp += 1;
        while node != ROOT {
            self.nodes[node].last_used = now;
            self.nodes[node].stamp = self.stamp;
            node = self.nodes[node].parent;
        }
    }

    fn add_users(&mut self, mut node: NodeId, delta: i64) {
        while node != ROOT {
            let n = &mut self.nodes[node];
            n.user_count = (n.user_count as i64 + delta).max(0) as u32;
            node = n.parent;
        }
    }

    /// Longest cached prefix of `seq`. Holds every node on the matched path
    /// until the handle is released.
    pub fn match_prefix(&mut self, seq: &[u64], now: f64) -> PrefixHandle {
        let (matched, node) = self.walk(seq);
        self.touch_path(node, now);
        self.add_users(node, 1);
        self.next_handle += 1;
        self.held.insert(self.next_handle, node);
        self.acquired += 1;
        PrefixHandle { id: self.next_handle, matched: matched as u64 }
    }

    pub fn release(&mut self, handle: PrefixHandle) -> Result<(), CacheError> {
        let node = self.held.remove(&handle.id).ok_or(CacheError::ReleaseWithoutMatch(handle.id))?;
        self.add_users(node, -1);
        self.released += 1;
        Ok(())
    }

    /// Caches KV for the first `kv_token_count` tokens of `seq`, evicting as
    /// needed. Returns how many new tokens were cached (may be partial when
    /// held nodes block eviction).
    pub fn insert_prefix(&mut self, seq: &[u64], kv_token_count: u64, now: f64) -> u64 {
        self.insert_prefix_logged(seq, kv_token_count, now).0
    }

    /// `insert_prefix`, also returning what was evicted to make room.
    pub fn insert_prefix_logged(&mut self, seq: &[u64], kv_token_count: u64, now: f64) -> (u64, Vec<Evicted>) {
        let seq = &seq[..(kv_token_count as usize).min(seq.len())];
        let (matched, node) = self.walk(seq);
        let need = (seq.len() - matched) as u64;
        let mut log = Vec::new();
        if need > 0 && self.cached + need > self.capacity {
            // The matched path is pinned while room is made.
            self.add_users(node, 1);
            log = self.evict_logged(self.cached + need - self.capacity);
            self.add_users(node, -1);
        }
        let add = need.min(self.capacity.saturating_sub(self.cached)) as usize;
        let mut last = node;
        if add > 0 {
            let tokens = seq[matched..matched + add].to_vec();
            let first = tokens[0];
            let leaf = self.alloc(Node {
                parent: node,
                tokens,
                children: BTreeMap::new(),
                user_count: 0,
                last_used: now,
                stamp: 0,
                alive: true,
            });
            self.nodes[node].children.insert(first, leaf);
            self.cached += add as u64;
            last = leaf;
        }
        self.touch_path(last, now);
        (add as u64, log)
    }

    fn lru_leaf(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, n)| n.alive && n.children.is_empty() && n.user_count == 0)
            .min_by(|a, b| a.1.last_used.total_cmp(&b.1.last_used).then(a.1.stamp.cmp(&b.1.stamp)))
            .map(|(id, _)| id)
    }

    fn path_of(&self, mut node: NodeId) -> Vec<u64> {
        let mut parts = Vec::new();
        while node != ROOT {
            parts.push(&self.nodes[node].tokens);
            node = self.nodes[node].parent;
        }
        parts.into_iter().rev().flatten().copied().collect()
    }

    fn remove_leaf(&mut self, id: NodeId) -> u64 {
        let len = self.nodes[id].tokens.len() as u64;
        let parent = self.nodes[id].parent;
        let first = self.nodes[id].tokens[0];
        self.nodes[parent].children.remove(&first);
        self.nodes[id].alive = false;
        self.nodes[id].tokens = Vec::new();
        self.free.push(id);
        self.cached -= len;
        self.evictions += 1;
        len
    }

    /// Evicts unused leaves in LRU order until `needed_tokens` are freed or
    /// nothing evictable remains. Returns the number of tokens freed.
    pub fn evict(&mut self, needed_tokens: u64) -> u64 {
        self.evict_logged(needed_tokens).iter().map(|e| e.len).sum()
    }

    pub fn evict_logged(&mut self, needed_tokens: u64) -> Vec<Evicted> {
        let mut freed = 0;
        let mut log = Vec::new();
        while freed < needed_tokens {
            let Some(leaf) = self.lru_leaf() else { break };
            let path = self.path_of(leaf);
            let len = self.remove_leaf(leaf);
            freed += len;
            log.push(Evicted { path, len });
        }
        log
    }

    /// Every cached node as (full path, user count); for invariant checks.
    pub fn snapshot(&self) -> Vec<(Vec<u64>, u32)> {
        let mut out: Vec<_> = (1..self.nodes.len())
            .filter(|&i| self.nodes[i].alive)
            .map(|i| (self.path_of(i), self.nodes[i].user_count))
            .collect();
        out.sort();
        out
    }
}

/// Both pools for one modality group.
#[derive(Debug, Clone)]
pub struct UnifiedCache {
    pub config: CacheConfig,
    pub images: ImagePool,
    pub prefixes: PrefixTree,
    pub stats: CacheStats,
}

impl UnifiedCache {
    pub fn new(config: CacheConfig) -> Self {
        let image_cap = (config.budget_tokens as f64 * config.image_fraction).floor() as u64;
        UnifiedCache {
            config,
            images: ImagePool::new(image_cap),
            prefixes: PrefixTree::new(config.budget_tokens - image_cap),
            stats: CacheStats::default(),
        }
    }

    /// Snapshot of stats with eviction counters folded in.
    pub fn stats(&self) -> CacheStats {
        CacheStats {
            image_evictions: self.images.evictions,
            prefix_evictions: self.prefixes.evictions,
            ..self.stats
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(s: &str) -> ContentHash {
        ContentHash::of(s)
    }

    #[test]
    fn image_pool_hit_and_miss() {
        let mut pool = ImagePool::new(20_000);
        assert_eq!(pool.lookup(h("a"), 0.0), None);
        assert!(pool.insert(h("a"), 6516, 0, 1.0));
        assert_eq!(pool.lookup(h("a"), 2.0), Some(6516));
        assert_eq!(pool.lookup(h("b"), 2.0), None);
        assert!(pool.insert(h("b"), 7410, 0, 3.0));
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn image_pool_evicts_lru() {
        let mut pool = ImagePool::new(15_000);
        pool.insert(h("a"), 6516, 0, 1.0);
        pool.insert(h("b"), 6516, 0, 2.0);
        pool.lookup(h("a"), 3.0);
        pool.insert(h("c"), 7410, 0, 4.0);
        assert!(pool.contains(h("a")));
        assert!(!pool.contains(h("b")));
        assert!(pool.used() <= pool.capacity());
        assert!(!pool.insert(h("huge"), 20_000, 0, 5.0));
    }

    #[test]
    fn empty_tree_matches_nothing() {
        let mut t = PrefixTree::new(100);
        let hd = t.match_prefix(&[1, 2, 3], 0.0);
        assert_eq!(hd.matched, 0);
        t.release(hd).unwrap();
    }

    #[test]
    fn longest_prefix_match() {
        let mut t = PrefixTree::new(100);
        t.insert_prefix(&[1, 2, 3, 4], 4, 0.0);
        let hd = t.match_prefix(&[1, 2, 9], 1.0);
        assert_eq!(hd.matched, 2);
        t.release(hd).unwrap();
        let hd = t.match_prefix(&[1, 2, 3, 4], 2.0);
        assert_eq!(hd.matched, 4);
        t.release(hd).unwrap();
        assert!(t.snapshot().iter().all(|(_, u)| *u == 0));
    }

    #[test]
    fn overlapping_inserts_share_a_node() {
        let mut t = PrefixTree::new(100);
        t.insert_prefix(&[1, 2, 3], 3, 0.0);
        t.insert_prefix(&[1, 2, 4], 3, 1.0);
        let paths: Vec<Vec<u64>> = t.snapshot().into_iter().map(|(p, _)| p).collect();
        assert_eq!(paths, vec![vec![1, 2], vec![1, 2, 3], vec![1, 2, 4]]);
        assert_eq!(t.cached_tokens(), 4);
    }

    #[test]
    fn double_release_is_an_error() {
        let mut t = PrefixTree::new(100);
        t.insert_prefix(&[1, 2], 2, 0.0);
        let hd = t.match_prefix(&[1, 2], 0.0);
        t.release(hd).unwrap();
        assert_eq!(t.release(hd), Err(CacheError::ReleaseWithoutMatch(hd.id)));
    }

    #[test]
    fn held_nodes_are_not_evicted() {
        let mut t = PrefixTree::new(100);
        t.insert_prefix(&[1, 2, 3], 3, 0.0);
        let hd = t.match_prefix(&[1, 2, 3], 1.0);
        assert_eq!(t.evict(10), 0);
        t.release(hd).unwrap();
        assert_eq!(t.evict(10), 3);
    }

    #[test]
    fn lru_order_among_idle_entries() {
        let mut t = PrefixTree::new(100);
        t.insert_prefix(&[10, 11], 2, 1.0);
        t.insert_prefix(&[20, 21], 2, 2.0);
        t.insert_prefix(&[30, 31], 2, 3.0);
        let log = t.evict_logged(2);
        assert_eq!(log, vec![Evicted { path: vec![10, 11], len: 2 }]);
    }

    #[test]
    fn insert_evicts_to_fit_capacity() {
        let mut t = PrefixTree::new(5);
        t.insert_prefix(&[1, 2, 3], 3, 0.0);
        assert_eq!(t.insert_prefix(&[4, 5, 6], 3, 1.0), 3);
        assert_eq!(t.cached_tokens(), 3);
        assert!(t.cached_tokens() <= t.capacity());
    }

    #[test]
    fn partial_insert_when_everything_is_held() {
        let mut t = PrefixTree::new(5);
        t.insert_prefix(&[1, 2, 3], 3, 0.0);
        let hd = t.match_prefix(&[1, 2, 3], 0.0);
        assert_eq!(t.insert_prefix(&[7, 8, 9, 10], 4, 1.0), 2);
        assert_eq!(t.cached_tokens(), 5);
        t.release(hd).unwrap();
    }

    #[test]
    fn unified_cache_splits_budget() {
        let c = UnifiedCache::new(CacheConfig { budget_tokens: 1000, image_fraction: 0.2 });
        assert_eq!(c.images.capacity(), 200);
        assert_eq!(c.prefixes.capacity(), 800);
    }
}
