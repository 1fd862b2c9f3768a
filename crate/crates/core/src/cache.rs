//! Radix-tree prefix cache over a device tier and a host tier.
//!
//! Nodes hold token segments. A node is either on the device, on the host,
//! or gone from the tree entirely. Every node records which agents of which
//! workflows have traversed it; once all of those workflows have terminated
//! the node is retired.
//!
//! Node ids are never reused, so logs and snapshots stay unambiguous.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::{AgentId, AgentMask, WorkflowId};

pub type Token = u32;
pub type NodeId = usize;

/// The root holds no tokens, lives on the device, and is never evicted.
pub const ROOT: NodeId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Device,
    Host,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Device => "device",
            Tier::Host => "host",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("the root node cannot be moved or dropped")]
    Root,
    #[error("node {node} is on {tier}, expected {expected}")]
    WrongTier { node: NodeId, tier: Tier, expected: Tier },
    #[error("node {0} still has device-resident children")]
    HasDeviceChildren(NodeId),
    #[error("node {0} has a parent that is not on the device")]
    ParentNotOnDevice(NodeId),
    #[error("node {0} is locked by a running invocation")]
    Locked(NodeId),
    #[error("need {needed} free device tokens, have {free}")]
    InsufficientSpace { needed: usize, free: usize },
    #[error("insertion would extend a host-resident prefix at node {0}")]
    HostPrefix(NodeId),
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("audit failed: {0}")]
    Audit(String),
}

#[derive(Clone, Debug)]
pub struct CacheNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub tokens: Vec<Token>,
    pub tier: Tier,
    pub children: BTreeMap<Token, NodeId>,
    /// Agents of each workflow that traversed this node. Terminated
    /// workflows stay in the map so popularity survives retirement.
    pub access: BTreeMap<WorkflowId, AgentMask>,
    pub retired: bool,
    pub last_access: u64,
    /// Token depth of the end of this node's segment.
    pub end_depth: usize,
    pub score: f64,
    locks: u32,
    device_children: u32,
}

impl CacheNode {
    pub fn token_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_locked(&self) -> bool {
        self.locks > 0
    }

    /// Number of distinct workflows that ever touched the node.
    pub fn historical_workflows(&self) -> usize {
        self.access.len()
    }

    pub fn has_device_children(&self) -> bool {
        self.device_children > 0
    }
}

#[derive(Clone, Debug, Default)]
struct WorkflowEntry {
    terminated: bool,
    nodes: BTreeSet<NodeId>,
}

/// Token counts of one prefix lookup. `path` lists the matched nodes from
/// the root down; device-resident nodes always precede host-resident ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub device_hit: usize,
    pub host_hit: usize,
    pub miss: usize,
    pub path: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertResult {
    /// Node created for the unmatched suffix, if any.
    pub new_node: Option<NodeId>,
    pub inserted: usize,
    /// Deepest node covering the sequence after insertion.
    pub leaf: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TierState {
    pub device_capacity: usize,
    pub host_capacity: usize,
    pub device_used: usize,
    pub host_used: usize,
}

impl TierState {
    pub fn free_device(&self) -> usize {
        self.device_capacity - self.device_used
    }

    pub fn free_host(&self) -> usize {
        self.host_capacity - self.host_used
    }
}

#[derive(Clone, Debug)]
pub struct CacheTree {
    nodes: Vec<Option<CacheNode>>,
    workflows: BTreeMap<WorkflowId, WorkflowEntry>,
    tiers: TierState,
    clock: u64,
    dirty: BTreeSet<NodeId>,
    unknown_terminations: u64,
}

fn common_prefix(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl CacheTree {
    pub fn new(device_capacity: usize, host_capacity: usize) -> Self {
        let root = CacheNode {
            id: ROOT,
            parent: None,
            tokens: Vec::new(),
            tier: Tier::Device,
            children: BTreeMap::new(),
            access: BTreeMap::new(),
            retired: false,
            last_access: 0,
            end_depth: 0,
            score: 0.0,
            locks: 0,
            device_children: 0,
        };
        CacheTree {
            nodes: vec![Some(root)],
            workflows: BTreeMap::new(),
            tiers: TierState { device_capacity, host_capacity, device_used: 0, host_used: 0 },
            clock: 0,
            dirty: BTreeSet::new(),
            unknown_terminations: 0,
        }
    }

    pub fn tiers(&self) -> TierState {
        self.tiers
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Terminations reported for workflows the tree never saw.
    pub fn unknown_terminations(&self) -> u64 {
        self.unknown_terminations
    }

    pub fn get(&self, id: NodeId) -> Option<&CacheNode> {
        self.nodes.get(id).and_then(Option::as_ref)
    }

    pub fn node(&self, id: NodeId) -> &CacheNode {
        self.get(id).unwrap_or_else(|| panic!("node {id} is not in the tree"))
    }

    fn node_mut(&mut self, id: NodeId) -> &mut CacheNode {
        self.nodes[id].as_mut().unwrap_or_else(|| panic!("node {id} is not in the tree"))
    }

    fn checked(&self, id: NodeId) -> Result<&CacheNode, CacheError> {
        self.get(id).ok_or(CacheError::UnknownNode(id))
    }

    /// All live nodes except the root, in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &CacheNode> + '_ {
        self.nodes.iter().skip(1).filter_map(Option::as_ref)
    }

    pub fn node_count(&self) -> usize {
        self.nodes().count()
    }

    pub fn is_workflow_terminated(&self, wf: WorkflowId) -> Option<bool> {
        self.workflows.get(&wf).map(|e| e.terminated)
    }

    /// Nodes currently tagged with `wf`.
    pub fn workflow_nodes(&self, wf: WorkflowId) -> impl Iterator<Item = NodeId> + '_ {
        self.workflows.get(&wf).into_iter().flat_map(|e| e.nodes.iter().copied())
    }

    /// Active workflows on a node with their agent masks.
    pub fn active_access(&self, id: NodeId) -> Vec<(WorkflowId, AgentMask)> {
        self.node(id)
            .access
            .iter()
            .filter(|(wf, _)| self.workflows.get(wf).is_some_and(|e| !e.terminated))
            .map(|(&wf, &m)| (wf, m))
            .collect()
    }

    pub fn device_child_count(&self, id: NodeId) -> u32 {
        self.node(id).device_children
    }

    /// Device node with no device children, not locked, not the root.
    pub fn is_evictable(&self, id: NodeId) -> bool {
        id != ROOT
            && self.get(id).is_some_and(|n| n.tier == Tier::Device && n.device_children == 0 && n.locks == 0)
    }

    pub fn set_score(&mut self, id: NodeId, score: f64) {
        let node = self.node_mut(id);
        if node.score != score {
            node.score = score;
            self.dirty.insert(id);
        }
    }

    /// Nodes whose ordering-relevant state changed since the last call.
    /// Removed nodes are included; callers check whether they still exist.
    pub fn take_dirty(&mut self) -> Vec<NodeId> {
        std::mem::take(&mut self.dirty).into_iter().collect()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Splits `id` after `at` tokens. The new upper node takes the first
    /// `at` tokens; `id` keeps the remainder and its children.
    fn split(&mut self, id: NodeId, at: usize) -> NodeId {
        let new_id = self.nodes.len();
        let lower = self.node_mut(id);
        debug_assert!(at > 0 && at < lower.tokens.len());
        let upper_tokens: Vec<Token> = lower.tokens.drain(..at).collect();
        let parent = lower.parent.expect("root is never split");
        let upper = CacheNode {
            id: new_id,
            parent: Some(parent),
            tokens: upper_tokens,
            tier: lower.tier,
            children: BTreeMap::from([(lower.tokens[0], id)]),
            access: lower.access.clone(),
            retired: lower.retired,
            last_access: lower.last_access,
            end_depth: lower.end_depth - lower.tokens.len(),
            score: lower.score,
            locks: lower.locks,
            device_children: u32::from(lower.tier == Tier::Device),
        };
        lower.parent = Some(new_id);
        let first = upper.tokens[0];
        let workflows: Vec<WorkflowId> = upper.access.keys().copied().collect();
        self.nodes.push(Some(upper));
        self.node_mut(parent).children.insert(first, new_id);
        for wf in workflows {
            self.workflows.entry(wf).or_default().nodes.insert(new_id);
        }
        self.dirty.insert(new_id);
        self.dirty.insert(id);
        new_id
    }

    /// Walks the longest matching prefix, splitting a partially matched node
    /// so that the path consists of whole nodes.
    fn walk(&mut self, tokens: &[Token]) -> (Vec<NodeId>, usize) {
        let mut path = Vec::new();
        let mut cur = ROOT;
        let mut pos = 0;
        while pos < tokens.len() {
            let Some(&child) = self.node(cur).children.get(&tokens[pos]) else { break };
            let seg_len = self.node(child).tokens.len();
            let common = common_prefix(&self.node(child).tokens, &tokens[pos..]);
            let matched = if common < seg_len { self.split(child, common) } else { child };
            path.push(matched);
            pos += common;
            cur = matched;
            if common < seg_len {
                break;
            }
        }
        (path, pos)
    }

    fn tag(&mut self, id: NodeId, wf: WorkflowId, agent: AgentId, now: u64) {
        let active = !self.workflows.entry(wf).or_default().terminated;
        self.workflows.get_mut(&wf).unwrap().nodes.insert(id);
        let node = self.node_mut(id);
        node.access.entry(wf).or_default().insert(agent);
        node.last_access = now;
        let retired = !active
            && self.node(id).access.keys().all(|w| self.workflows.get(w).is_some_and(|e| e.terminated));
        self.node_mut(id).retired = retired;
        self.dirty.insert(id);
    }

    /// Longest-prefix lookup. Tags every matched node with `(wf, agent)` and
    /// bumps its access time.
    pub fn match_prefix(&mut self, tokens: &[Token], wf: WorkflowId, agent: AgentId) -> MatchResult {
        let now = self.tick();
        let (path, matched) = self.walk(tokens);
        let mut device_hit = 0;
        let mut host_hit = 0;
        for &id in &path {
            self.tag(id, wf, agent, now);
            let node = self.node(id);
            match node.tier {
                Tier::Device => device_hit += node.token_len(),
                Tier::Host => host_hit += node.token_len(),
            }
        }
        MatchResult { device_hit, host_hit, miss: tokens.len() - matched, path }
    }

    /// Read-only version of [`match_prefix`](Self::match_prefix): counts only.
    pub fn peek_prefix(&self, tokens: &[Token]) -> (usize, usize, usize) {
        let mut cur = ROOT;
        let mut pos = 0;
        let (mut device, mut host) = (0, 0);
        while pos < tokens.len() {
            let Some(&child) = self.node(cur).children.get(&tokens[pos]) else { break };
            let node = self.node(child);
            let common = common_prefix(&node.tokens, &tokens[pos..]);
            match node.tier {
                Tier::Device => device += common,
                Tier::Host => host += common,
            }
            pos += common;
            if common < node.tokens.len() {
                break;
            }
            cur = child;
        }
        (device, host, tokens.len() - pos)
    }

    /// Inserts the unmatched suffix of `tokens` as one new device node.
    /// The matched prefix must be entirely on the device.
    pub fn insert_suffix(&mut self, tokens: &[Token], wf: WorkflowId, agent: AgentId) -> Result<InsertResult, CacheError> {
        if tokens.is_empty() {
            return Err(CacheError::EmptySequence);
        }
        let (device, host, miss) = self.peek_prefix(tokens);
        if host > 0 {
            let (path, _) = self.walk(&tokens[..device + host]);
            let first_host = path
                .iter()
                .copied()
                .find(|&id| self.node(id).tier == Tier::Host)
                .expect("host tokens imply a host node");
            return Err(CacheError::HostPrefix(first_host));
        }
        if miss > self.tiers.free_device() {
            return Err(CacheError::InsufficientSpace { needed: miss, free: self.tiers.free_device() });
        }
        let now = self.tick();
        let (path, matched) = self.walk(tokens);
        for &id in &path {
            self.tag(id, wf, agent, now);
        }
        let parent = path.last().copied().unwrap_or(ROOT);
        if matched == tokens.len() {
            return Ok(InsertResult { new_node: None, inserted: 0, leaf: parent });
        }
        let id = self.nodes.len();
        let suffix = tokens[matched..].to_vec();
        let parent_depth = self.node(parent).end_depth;
        self.nodes.push(Some(CacheNode {
            id,
            parent: Some(parent),
            tokens: suffix,
            tier: Tier::Device,
            children: BTreeMap::new(),
            access: BTreeMap::new(),
            retired: false,
            last_access: now,
            end_depth: parent_depth + miss,
            score: 0.0,
            locks: 0,
            device_children: 0,
        }));
        let p = self.node_mut(parent);
        p.children.insert(tokens[matched], id);
        p.device_children += 1;
        self.tiers.device_used += miss;
        self.tag(id, wf, agent, now);
        Ok(InsertResult { new_node: Some(id), inserted: miss, leaf: id })
    }

    /// Marks the workflow terminated and retires every node whose workflows
    /// have now all terminated. Returns the number of newly retired nodes.
    pub fn on_workflow_terminated(&mut self, wf: WorkflowId) -> usize {
        let Some(entry) = self.workflows.get_mut(&wf) else {
            self.unknown_terminations += 1;
            warn!("termination for unknown workflow {wf}");
            return 0;
        };
        entry.terminated = true;
        let nodes: Vec<NodeId> = entry.nodes.iter().copied().collect();
        let mut retired = 0;
        for id in nodes {
            let all_done = self
                .node(id)
                .access
                .keys()
                .all(|w| self.workflows.get(w).is_some_and(|e| e.terminated));
            let node = self.node_mut(id);
            if all_done && !node.retired {
                node.retired = true;
                retired += 1;
            }
            self.dirty.insert(id);
        }
        retired
    }

    /// Moves a device node with no device children to the host tier. If the
    /// host tier lacks room the node is dropped instead. Returns the tier the
    /// node ended on, `None` if dropped.
    pub fn demote_to_host(&mut self, id: NodeId) -> Result<Option<Tier>, CacheError> {
        if id == ROOT {
            return Err(CacheError::Root);
        }
        let node = self.checked(id)?;
        if node.tier != Tier::Device {
            return Err(CacheError::WrongTier { node: id, tier: node.tier, expected: Tier::Device });
        }
        if node.device_children > 0 {
            return Err(CacheError::HasDeviceChildren(id));
        }
        if node.locks > 0 {
            return Err(CacheError::Locked(id));
        }
        let len = node.token_len();
        if len > self.tiers.free_host() {
            self.drop_node(id)?;
            return Ok(None);
        }
        let parent = node.parent.expect("non-root has a parent");
        self.node_mut(id).tier = Tier::Host;
        self.node_mut(parent).device_children -= 1;
        self.tiers.device_used -= len;
        self.tiers.host_used += len;
        self.dirty.insert(id);
        Ok(Some(Tier::Host))
    }

    /// Moves a host node whose parent is on the device back to the device.
    pub fn promote_to_device(&mut self, id: NodeId) -> Result<(), CacheError> {
        if id == ROOT {
            return Err(CacheError::Root);
        }
        let node = self.checked(id)?;
        if node.tier != Tier::Host {
            return Err(CacheError::WrongTier { node: id, tier: node.tier, expected: Tier::Host });
        }
        let parent = node.parent.expect("non-root has a parent");
        if self.node(parent).tier != Tier::Device {
            return Err(CacheError::ParentNotOnDevice(id));
        }
        let len = node.token_len();
        if len > self.tiers.free_device() {
            return Err(CacheError::InsufficientSpace { needed: len, free: self.tiers.free_device() });
        }
        self.node_mut(id).tier = Tier::Device;
        self.node_mut(parent).device_children += 1;
        self.tiers.host_used -= len;
        self.tiers.device_used += len;
        self.dirty.insert(id);
        Ok(())
    }

    /// Removes a node and its whole subtree from both tiers. A device node
    /// must have no device children; nothing in the subtree may be locked.
    pub fn drop_node(&mut self, id: NodeId) -> Result<usize, CacheError> {
        if id == ROOT {
            return Err(CacheError::Root);
        }
        let node = self.checked(id)?;
        if node.tier == Tier::Device && node.device_children > 0 {
            return Err(CacheError::HasDeviceChildren(id));
        }
        let mut subtree = vec![id];
        let mut i = 0;
        while i < subtree.len() {
            let n = self.node(subtree[i]);
            if n.locks > 0 {
                return Err(CacheError::Locked(n.id));
            }
            subtree.extend(n.children.values().copied());
            i += 1;
        }
        let parent = node.parent.expect("non-root has a parent");
        let first = node.tokens[0];
        let was_device = node.tier == Tier::Device;
        let p = self.node_mut(parent);
        p.children.remove(&first);
        if was_device {
            p.device_children -= 1;
        }
        let mut removed = 0;
        for nid in subtree {
            let n = self.nodes[nid].take().expect("subtree nodes exist");
            match n.tier {
                Tier::Device => self.tiers.device_used -= n.token_len(),
                Tier::Host => self.tiers.host_used -= n.token_len(),
            }
            removed += n.token_len();
            for wf in n.access.keys() {
                if let Some(e) = self.workflows.get_mut(wf) {
                    e.nodes.remove(&nid);
                }
            }
            self.dirty.insert(nid);
        }
        Ok(removed)
    }

    /// Pins `id` and all its ancestors against eviction.
    pub fn lock_path(&mut self, id: NodeId) {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == ROOT {
                break;
            }
            let n = self.node_mut(c);
            n.locks += 1;
            cur = n.parent;
            self.dirty.insert(c);
        }
    }

    pub fn unlock_path(&mut self, id: NodeId) {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == ROOT {
                break;
            }
            let n = self.node_mut(c);
            assert!(n.locks > 0, "unlocking node {c} that is not locked");
            n.locks -= 1;
            cur = n.parent;
            self.dirty.insert(c);
        }
    }

    /// Device tokens held by retired nodes.
    pub fn retired_device_tokens(&self) -> usize {
        self.nodes()
            .filter(|n| n.tier == Tier::Device && n.retired)
            .map(CacheNode::token_len)
            .sum()
    }

    /// Device tokens held by nodes that are not retired.
    pub fn active_device_tokens(&self) -> usize {
        self.nodes()
            .filter(|n| n.tier == Tier::Device && !n.retired)
            .map(CacheNode::token_len)
            .sum()
    }

    /// Recomputes every invariant from scratch.
    pub fn audit(&self) -> Result<(), CacheError> {
        let fail = |msg: String| Err(CacheError::Audit(msg));
        let (mut device, mut host) = (0, 0);
        for node in self.nodes() {
            let id = node.id;
            match node.tier {
                Tier::Device => device += node.token_len(),
                Tier::Host => host += node.token_len(),
            }
            if node.tokens.is_empty() {
                return fail(format!("node {id} has an empty segment"));
            }
            let Some(parent) = node.parent.and_then(|p| self.get(p)) else {
                return fail(format!("node {id} has a missing parent"));
            };
            if parent.children.get(&node.tokens[0]) != Some(&id) {
                return fail(format!("node {id} is not indexed by its first token under {}", parent.id));
            }
            if parent.end_depth + node.token_len() != node.end_depth {
                return fail(format!("node {id} has inconsistent depth"));
            }
            if node.tier == Tier::Device && parent.tier != Tier::Device {
                return fail(format!("device node {id} under host node {}", parent.id));
            }
            if node.locks > parent.locks && parent.id != ROOT {
                return fail(format!("node {id} is locked more often than its parent"));
            }
            if node.access.is_empty() {
                return fail(format!("node {id} has no access record"));
            }
            let all_done = node
                .access
                .keys()
                .all(|w| self.workflows.get(w).is_some_and(|e| e.terminated));
            if node.retired != all_done {
                return fail(format!("node {id} retired={} but all-terminated={all_done}", node.retired));
            }
            for wf in node.access.keys() {
                if !self.workflows.get(wf).is_some_and(|e| e.nodes.contains(&id)) {
                    return fail(format!("node {id} missing from workflow {wf}'s node set"));
                }
            }
        }
        for node in self.nodes.iter().filter_map(Option::as_ref) {
            let mut device_children = 0;
            for (&first, &child) in &node.children {
                let Some(c) = self.get(child) else {
                    return fail(format!("node {} lists missing child {child}", node.id));
                };
                if c.tokens[0] != first || c.parent != Some(node.id) {
                    return fail(format!("child link {} -> {child} is inconsistent", node.id));
                }
                if c.tier == Tier::Device {
                    device_children += 1;
                }
            }
            if device_children != node.device_children {
                return fail(format!("node {} device-child count drifted", node.id));
            }
        }
        for (wf, entry) in &self.workflows {
            for id in &entry.nodes {
                if !self.get(*id).is_some_and(|n| n.access.contains_key(wf)) {
                    return fail(format!("workflow {wf} lists node {id} without access"));
                }
            }
        }
        if device != self.tiers.device_used || host != self.tiers.host_used {
            return fail(format!(
                "tier sums device={device} host={host} disagree with accounting {:?}",
                self.tiers
            ));
        }
        if device > self.tiers.device_capacity || host > self.tiers.host_capacity {
            return fail(format!("tier over capacity: {:?}", self.tiers));
        }
        Ok(())
    }

    /// One CSV record per node: `node_id,parent_id,token_len,tier,retired,workflows`.
    /// Workflows are `;`-separated.
    pub fn dump_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "node_id,parent_id,token_len,tier,retired,workflows")?;
        for node in self.nodes() {
            let workflows: Vec<String> = node.access.keys().map(|w| w.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                node.id,
                node.parent.unwrap_or(ROOT),
                node.token_len(),
                node.tier,
                node.retired,
                workflows.join(";")
            )?;
        }
        Ok(())
    }

    pub fn dump_string(&self) -> String {
        let mut buf = Vec::new();
        self.dump_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("dump is ascii")
    }
}
