//! Reuse value and lookahead score of cache nodes, plus the indexed heap
//! that keeps device nodes in eviction order.
//!
//! For a node `c` tagged by active workflows `W`, with agent mask `A_w` and
//! forecast steps `P_w^(k)`:
//!
//! ```text
//! value(c) = sum_w  A_w . P_w^(1)
//! score(c) = sum_k gamma^(k-1) sum_w s_w^(k) A_w . P_w^(k)
//! ```
//!
//! where `s_w^(k)` is the probability that `w` is still running at step `k`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheTree, NodeId, Tier};
use crate::callgraph::{AgentMask, WorkflowId};
use crate::predictor::Forecast;

pub const DEFAULT_HORIZON: usize = 3;
pub const DEFAULT_GAMMA: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("no forecast for active workflow {0}")]
    MissingForecast(WorkflowId),
    #[error("forecast for workflow {wf} covers {got} steps, need {need}")]
    ShortForecast { wf: WorkflowId, got: usize, need: usize },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("gamma {0} must lie in (0, 1)")]
    Gamma(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreParams {
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams { horizon: DEFAULT_HORIZON, gamma: DEFAULT_GAMMA }
    }
}

impl ScoreParams {
    pub fn new(horizon: usize, gamma: f64) -> Result<Self, ScoreError> {
        let p = ScoreParams { horizon, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.horizon == 0 {
            return Err(ScoreError::ZeroHorizon);
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ScoreError::Gamma(self.gamma));
        }
        Ok(())
    }

    /// `(1 - gamma^K) / (2 (1 - gamma))`: how far a score can move per unit of
    /// discounted L1 forecast error.
    pub fn lipschitz_constant(&self) -> f64 {
        (1.0 - self.gamma.powi(self.horizon as i32)) / (2.0 * (1.0 - self.gamma))
    }

    /// The horizon-free constant `1 / (2 (1 - gamma))`.
    pub fn loose_lipschitz_constant(&self) -> f64 {
        1.0 / (2.0 * (1.0 - self.gamma))
    }
}

pub fn survival_probs(f: &Forecast) -> Vec<f64> {
    f.survival_probs()
}

fn mask_mass(mask: AgentMask, dist: &[f64]) -> f64 {
    mask.iter().map(|a| dist[a.0]).sum()
}

fn lookup(forecasts: &BTreeMap<WorkflowId, Forecast>, wf: WorkflowId, need: usize) -> Result<&Forecast, ScoreError> {
    let f = forecasts.get(&wf).ok_or(ScoreError::MissingForecast(wf))?;
    if f.horizon() < need {
        return Err(ScoreError::ShortForecast { wf, got: f.horizon(), need });
    }
    Ok(f)
}

/// One-step reuse value over the active workflows in `access`.
pub fn single_step_value(
    access: &[(WorkflowId, AgentMask)],
    forecasts: &BTreeMap<WorkflowId, Forecast>,
) -> Result<f64, ScoreError> {
    let mut value = 0.0;
    for &(wf, mask) in access {
        value += mask_mass(mask, lookup(forecasts, wf, 1)?.step(0));
    }
    Ok(value)
}

/// Discounted, survival-weighted lookahead score over the active workflows in `access`.
pub fn multi_step_score(
    access: &[(WorkflowId, AgentMask)],
    forecasts: &BTreeMap<WorkflowId, Forecast>,
    params: ScoreParams,
) -> Result<f64, ScoreError> {
    let mut score = 0.0;
    for &(wf, mask) in access {
        let f = lookup(forecasts, wf, params.horizon)?;
        let mut weight = 1.0;
        let mut survival = 1.0;
        for k in 0..params.horizon {
            score += weight * survival * mask_mass(mask, f.step(k));
            weight *= params.gamma;
            survival *= 1.0 - f.p_end(k);
        }
    }
    Ok(score)
}

pub fn node_value(tree: &CacheTree, id: NodeId, forecasts: &BTreeMap<WorkflowId, Forecast>) -> Result<f64, ScoreError> {
    single_step_value(&tree.active_access(id), forecasts)
}

pub fn node_score(
    tree: &CacheTree,
    id: NodeId,
    forecasts: &BTreeMap<WorkflowId, Forecast>,
    params: ScoreParams,
) -> Result<f64, ScoreError> {
    multi_step_score(&tree.active_access(id), forecasts, params)
}

/// Ordering used by the hierarchical policy: retired nodes first, least
/// popular first among them; then active nodes by ascending score. Ties go
/// to the older access, then the deeper node, then the lower id.
#[derive(Clone, Copy, Debug)]
pub struct EvictionKey {
    pub retired: bool,
    /// Historical workflow count for retired nodes, score for active ones.
    pub primary: f64,
    pub last_access: u64,
    pub depth: usize,
    pub node: NodeId,
}

impl EvictionKey {
    pub fn for_node(tree: &CacheTree, id: NodeId) -> Self {
        let n = tree.node(id);
        EvictionKey {
            retired: n.retired,
            primary: if n.retired { n.historical_workflows() as f64 } else { n.score },
            last_access: n.last_access,
            depth: n.end_depth,
            node: id,
        }
    }
}

impl Ord for EvictionKey {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .retired
            .cmp(&self.retired)
            .then_with(|| self.primary.total_cmp(&other.primary))
            .then_with(|| self.last_access.cmp(&other.last_access))
            .then_with(|| other.depth.cmp(&self.depth))
            .then_with(|| self.node.cmp(&other.node))
    }
}

impl PartialOrd for EvictionKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for EvictionKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for EvictionKey {}

const NOT_IN_HEAP: usize = usize::MAX;

/// Binary min-heap of eviction keys with a node-to-slot index, so that a
/// node's key can be changed or removed in O(log n).
#[derive(Clone, Debug, Default)]
pub struct ScoreHeap {
    heap: Vec<EvictionKey>,
    slot: Vec<usize>,
    last_sift: usize,
    max_sift: usize,
}

impl ScoreHeap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.slot.get(id).is_some_and(|&s| s != NOT_IN_HEAP)
    }

    pub fn key(&self, id: NodeId) -> Option<EvictionKey> {
        self.slot.get(id).filter(|&&s| s != NOT_IN_HEAP).map(|&s| self.heap[s])
    }

    pub fn peek(&self) -> Option<EvictionKey> {
        self.heap.first().copied()
    }

    /// Swaps performed by the most recent update.
    pub fn last_sift_depth(&self) -> usize {
        self.last_sift
    }

    /// Largest swap count of any single update so far.
    pub fn max_sift_depth(&self) -> usize {
        self.max_sift
    }

    fn record_sift(&mut self, swaps: usize) {
        self.last_sift = swaps;
        self.max_sift = self.max_sift.max(swaps);
    }

    fn place(&mut self, i: usize) {
        let id = self.heap[i].node;
        if self.slot.len() <= id {
            self.slot.resize(id + 1, NOT_IN_HEAP);
        }
        self.slot[id] = i;
    }

    fn swap(&mut self, a: usize, b: usize) {
        self.heap.swap(a, b);
        self.place(a);
        self.place(b);
    }

    fn sift_up(&mut self, mut i: usize) -> usize {
        let mut swaps = 0;
        while i > 0 {
            let parent = (i - 1) / 2;
            if self.heap[i] >= self.heap[parent] {
                break;
            }
            self.swap(i, parent);
            i = parent;
            swaps += 1;
        }
        swaps
    }

    fn sift_down(&mut self, mut i: usize) -> usize {
        let mut swaps = 0;
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut smallest = i;
            if l < self.heap.len() && self.heap[l] < self.heap[smallest] {
                smallest = l;
            }
            if r < self.heap.len() && self.heap[r] < self.heap[smallest] {
                smallest = r;
            }
            if smallest == i {
                return swaps;
            }
            self.swap(i, smallest);
            i = smallest;
            swaps += 1;
        }
    }

    /// Inserts the key or moves an existing entry for the same node.
    pub fn upsert(&mut self, key: EvictionKey) {
        let swaps = match self.slot.get(key.node).copied().filter(|&s| s != NOT_IN_HEAP) {
            Some(i) => {
                self.heap[i] = key;
                self.sift_up(i) + self.sift_down(i)
            }
            None => {
                self.heap.push(key);
                let i = self.heap.len() - 1;
                self.place(i);
                self.sift_up(i)
            }
        };
        self.record_sift(swaps);
    }

    pub fn remove(&mut self, id: NodeId) -> Option<EvictionKey> {
        let i = self.slot.get(id).copied().filter(|&s| s != NOT_IN_HEAP)?;
        let last = self.heap.len() - 1;
        self.swap(i, last);
        let key = self.heap.pop().expect("non-empty");
        self.slot[id] = NOT_IN_HEAP;
        let mut swaps = 0;
        if i < self.heap.len() {
            swaps = self.sift_up(i) + self.sift_down(i);
        }
        self.record_sift(swaps);
        Some(key)
    }

    pub fn pop(&mut self) -> Option<EvictionKey> {
        let top = self.peek()?;
        self.remove(top.node)
    }

    /// Brings the heap in line with the tree's changed nodes: device nodes
    /// get fresh keys, everything else leaves the heap.
    pub fn sync(&mut self, tree: &mut CacheTree) {
        for id in tree.take_dirty() {
            match tree.get(id) {
                Some(n) if n.tier == Tier::Device => self.upsert(EvictionKey::for_node(tree, id)),
                _ => {
                    self.remove(id);
                }
            }
        }
    }

    /// Rebuilds the heap from every device node in the tree.
    pub fn rebuild(tree: &CacheTree) -> Self {
        let mut heap = ScoreHeap::new();
        for n in tree.nodes().filter(|n| n.tier == Tier::Device) {
            heap.upsert(EvictionKey::for_node(tree, n.id));
        }
        heap
    }

    /// Keys in ascending order without modifying the heap. Walks the heap
    /// array best-first, so taking `m` keys costs O(m log m).
    pub fn ascending(&self) -> impl Iterator<Item = EvictionKey> + '_ {
        let mut frontier = BinaryHeap::new();
        if !self.heap.is_empty() {
            frontier.push(Reverse((self.heap[0], 0usize)));
        }
        std::iter::from_fn(move || {
            let Reverse((key, i)) = frontier.pop()?;
            for child in [2 * i + 1, 2 * i + 2] {
                if child < self.heap.len() {
                    frontier.push(Reverse((self.heap[child], child)));
                }
            }
            Some(key)
        })
    }

    /// All keys sorted ascending.
    pub fn sorted_keys(&self) -> Vec<EvictionKey> {
        let mut keys = self.heap.clone();
        keys.sort();
        keys
    }

    /// Checks heap order and the slot index.
    pub fn audit(&self) -> Result<(), String> {
        for i in 1..self.heap.len() {
            if self.heap[i] < self.heap[(i - 1) / 2] {
                return Err(format!("heap order broken at slot {i}"));
            }
        }
        for (i, key) in self.heap.iter().enumerate() {
            if self.slot.get(key.node) != Some(&i) {
                return Err(format!("slot index for node {} is stale", key.node));
            }
        }
        let indexed = self.slot.iter().filter(|&&s| s != NOT_IN_HEAP).count();
        if indexed != self.heap.len() {
            return Err(format!("{indexed} indexed nodes but {} heap entries", self.heap.len()));
        }
        Ok(())
    }
}

/// Recomputes the score of every node tagged by `changed`, and repositions
/// device-resident ones in the heap. Other nodes are left alone. Returns
/// the number of nodes recomputed.
pub fn refresh_scores(
    tree: &mut CacheTree,
    changed: WorkflowId,
    forecasts: &BTreeMap<WorkflowId, Forecast>,
    params: ScoreParams,
    heap: &mut ScoreHeap,
) -> Result<usize, ScoreError> {
    let ids: Vec<NodeId> = tree.workflow_nodes(changed).collect();
    for &id in &ids {
        let score = node_score(tree, id, forecasts, params)?;
        tree.set_score(id, score);
        if tree.node(id).tier == Tier::Device {
            heap.upsert(EvictionKey::for_node(tree, id));
        }
    }
    Ok(ids.len())
}

/// Writes `node_id,score` for every node in the tree.
pub fn write_scores_csv<W: Write>(tree: &CacheTree, mut out: W) -> io::Result<()> {
    writeln!(out, "node_id,score")?;
    for n in tree.nodes() {
        writeln!(out, "{},{}", n.id, n.score)?;
    }
    Ok(())
}
