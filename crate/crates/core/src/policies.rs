//! Eviction victim selection and host-to-device prefetch planning.
//!
//! Victims are always device nodes without device children. Evicting a node
//! can expose its parent as a new candidate within the same call, so every
//! selector walks its own eviction order and admits parents as they free up.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheTree, NodeId, Tier, ROOT};
use crate::callgraph::{AgentId, WorkflowId};
use crate::predictor::Forecast;
use crate::scoring::{node_value, ScoreError, ScoreHeap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionPolicy {
    /// Least recently used leaf first.
    Lru,
    /// Retired nodes first (least popular first), then LRU.
    Lifecycle,
    /// Retired nodes first, then active nodes by ascending lookahead score.
    Hierarchical,
    /// Farthest next use on a static schedule first.
    Kvflow,
}

impl EvictionPolicy {
    pub const ALL: [EvictionPolicy; 4] =
        [EvictionPolicy::Lru, EvictionPolicy::Lifecycle, EvictionPolicy::Hierarchical, EvictionPolicy::Kvflow];

    pub fn name(self) -> &'static str {
        match self {
            EvictionPolicy::Lru => "lru",
            EvictionPolicy::Lifecycle => "lifecycle",
            EvictionPolicy::Hierarchical => "hierarchical",
            EvictionPolicy::Kvflow => "kvflow",
        }
    }

    /// Policies that know which nodes are retired and drop them outright.
    pub fn is_lifecycle_aware(self) -> bool {
        matches!(self, EvictionPolicy::Lifecycle | EvictionPolicy::Hierarchical)
    }

    pub fn uses_scores(self) -> bool {
        self == EvictionPolicy::Hierarchical
    }
}

impl fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvictionPolicy {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PolicyError::UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("unknown eviction policy `{0}`")]
    UnknownPolicy(String),
    #[error("steps-to-execution eviction needs a static schedule for active workflow {0}")]
    MissingSchedule(WorkflowId),
    #[error("displacement fraction {0} is outside [0, 1]")]
    Rho(f64),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Victims in eviction order. `shortfall` is set when every evictable node
/// together could not free `needed` tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VictimList {
    pub victims: Vec<NodeId>,
    pub freed: usize,
    pub shortfall: bool,
}

/// Picks victims following `order`, which must list device nodes from most
/// to least evictable. Locked nodes are skipped; a node whose device
/// children are all already chosen becomes eligible at its own rank.
pub fn select_in_order<I>(tree: &CacheTree, needed: usize, order: I) -> VictimList
where
    I: IntoIterator<Item = NodeId>,
{
    select_after(tree, needed, &[], order)
}

/// Continues a selection in which `already` were chosen earlier, so their
/// parents count as exposed.
fn select_after<I>(tree: &CacheTree, needed: usize, already: &[NodeId], order: I) -> VictimList
where
    I: IntoIterator<Item = NodeId>,
{
    let mut out = VictimList::default();
    let mut pending: BTreeMap<NodeId, u32> = BTreeMap::new();
    let mut blocked: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut ready: BinaryHeap<Reverse<(usize, NodeId)>> = BinaryHeap::new();
    let chosen: BTreeSet<NodeId> = already.iter().copied().collect();
    let expose = |pending: &mut BTreeMap<NodeId, u32>, victim: NodeId| -> Option<NodeId> {
        let parent = tree.node(victim).parent.unwrap_or(ROOT);
        if parent == ROOT {
            return None;
        }
        let left = pending.entry(parent).or_insert_with(|| tree.device_child_count(parent));
        *left -= 1;
        (*left == 0).then_some(parent)
    };
    for &id in already {
        expose(&mut pending, id);
    }
    let mut order = order.into_iter().enumerate();
    while out.freed < needed {
        // Anything in `ready` was seen earlier in the order, so it ranks
        // ahead of whatever the order yields next.
        let victim = if let Some(Reverse((_, id))) = ready.pop() {
            id
        } else {
            let Some((rank, id)) = order.next() else {
                out.shortfall = true;
                break;
            };
            let Some(node) = tree.get(id) else { continue };
            if id == ROOT || node.tier != Tier::Device || node.is_locked() || chosen.contains(&id) {
                continue;
            }
            let left = pending.get(&id).copied().unwrap_or_else(|| tree.device_child_count(id));
            if left > 0 {
                blocked.insert(id, rank);
                continue;
            }
            id
        };
        out.freed += tree.node(victim).token_len();
        out.victims.push(victim);
        if let Some(parent) = expose(&mut pending, victim) {
            if let Some(rank) = blocked.remove(&parent) {
                ready.push(Reverse((rank, parent)));
            }
        }
    }
    out
}

fn lru_order(tree: &CacheTree, filter: impl Fn(&crate::cache::CacheNode) -> bool) -> Vec<NodeId> {
    let mut nodes: Vec<_> = tree
        .nodes()
        .filter(|n| n.tier == Tier::Device && filter(n))
        .map(|n| (n.last_access, Reverse(n.end_depth), n.id))
        .collect();
    nodes.sort();
    nodes.into_iter().map(|(_, _, id)| id).collect()
}

/// Retired device nodes, least popular first, then by access time.
fn retired_order(tree: &CacheTree) -> Vec<NodeId> {
    let mut nodes: Vec<_> = tree
        .nodes()
        .filter(|n| n.tier == Tier::Device && n.retired)
        .map(|n| (n.historical_workflows(), n.last_access, Reverse(n.end_depth), n.id))
        .collect();
    nodes.sort();
    nodes.into_iter().map(|(_, _, _, id)| id).collect()
}

pub fn select_victims_lru(tree: &CacheTree, needed: usize) -> VictimList {
    select_in_order(tree, needed, lru_order(tree, |_| true))
}

pub fn select_victims_lifecycle(tree: &CacheTree, needed: usize) -> VictimList {
    let mut order = retired_order(tree);
    order.extend(lru_order(tree, |n| !n.retired));
    select_in_order(tree, needed, order)
}

/// Heap order: retired (least popular first) before active (lowest score first).
/// The heap must be in sync with the tree.
pub fn select_victims_hierarchical(tree: &CacheTree, needed: usize, heap: &ScoreHeap) -> VictimList {
    select_in_order(tree, needed, heap.ascending().map(|k| k.node))
}

/// Steps until any agent that touched `id` next runs in its workflow's
/// remaining schedule, minimized over active workflows. `None` if never.
pub fn steps_to_execution(
    tree: &CacheTree,
    id: NodeId,
    schedules: &BTreeMap<WorkflowId, Vec<AgentId>>,
) -> Result<Option<usize>, PolicyError> {
    let mut best: Option<usize> = None;
    for (wf, mask) in tree.active_access(id) {
        let remaining = schedules.get(&wf).ok_or(PolicyError::MissingSchedule(wf))?;
        if let Some(pos) = remaining.iter().position(|&a| mask.contains(a)) {
            best = Some(best.map_or(pos + 1, |b| b.min(pos + 1)));
        }
    }
    Ok(best)
}

/// Retired nodes first, then nodes never needed again, then the rest by
/// descending steps-to-execution; ties by access time.
pub fn select_victims_kvflow(
    tree: &CacheTree,
    needed: usize,
    schedules: &BTreeMap<WorkflowId, Vec<AgentId>>,
) -> Result<VictimList, PolicyError> {
    let mut keyed = Vec::new();
    for n in tree.nodes().filter(|n| n.tier == Tier::Device) {
        let class = if n.retired {
            (0, 0)
        } else {
            match steps_to_execution(tree, n.id, schedules)? {
                None => (1, 0),
                Some(d) => (2, usize::MAX - d),
            }
        };
        keyed.push((class, n.last_access, Reverse(n.end_depth), n.id));
    }
    keyed.sort();
    Ok(select_in_order(tree, needed, keyed.into_iter().map(|(_, _, _, id)| id)))
}

/// Dispatches to the selector for `policy`.
pub fn select_victims(
    policy: EvictionPolicy,
    tree: &CacheTree,
    needed: usize,
    heap: &ScoreHeap,
    schedules: Option<&BTreeMap<WorkflowId, Vec<AgentId>>>,
) -> Result<VictimList, PolicyError> {
    Ok(match policy {
        EvictionPolicy::Lru => select_victims_lru(tree, needed),
        EvictionPolicy::Lifecycle => select_victims_lifecycle(tree, needed),
        EvictionPolicy::Hierarchical => select_victims_hierarchical(tree, needed, heap),
        EvictionPolicy::Kvflow => {
            let schedules = schedules.ok_or(PolicyError::MissingSchedule(0))?;
            select_victims_kvflow(tree, needed, schedules)?
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefetchCandidate {
    pub node: NodeId,
    pub value: f64,
    pub tokens: usize,
}

/// A prefetch round. Execute `displaced` in order (retired nodes are
/// dropped, active ones demoted), then promote `selected` in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrefetchPlan {
    /// Host nodes considered, by descending one-step value.
    pub candidates: Vec<PrefetchCandidate>,
    /// Free plus retired device tokens.
    pub budget_space: usize,
    /// Tokens the link can move this step.
    pub budget_bw: usize,
    /// Extra device tokens that may be taken from active nodes.
    pub budget_displace: usize,
    pub selected: Vec<NodeId>,
    pub selected_tokens: usize,
    pub displaced: Vec<NodeId>,
}

impl PrefetchPlan {
    pub fn budget(&self) -> usize {
        (self.budget_space + self.budget_displace).min(self.budget_bw)
    }
}

/// Greedy value-ordered promotion of host nodes whose parent is on the
/// device. Promoting a node makes its host children candidates too. Only
/// free and retired device space is used.
pub fn plan_conservative_prefetch(
    tree: &CacheTree,
    forecasts: &BTreeMap<WorkflowId, Forecast>,
    bandwidth: usize,
    step_duration: usize,
) -> Result<PrefetchPlan, PolicyError> {
    plan_prefetch(tree, forecasts, bandwidth, step_duration, 0.0, None)
}

/// Like the conservative plan, but may also displace active device nodes in
/// ascending score order, up to `rho` of the device capacity.
pub fn plan_aggressive_prefetch(
    tree: &CacheTree,
    forecasts: &BTreeMap<WorkflowId, Forecast>,
    bandwidth: usize,
    step_duration: usize,
    rho: f64,
    heap: &ScoreHeap,
) -> Result<PrefetchPlan, PolicyError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(PolicyError::Rho(rho));
    }
    plan_prefetch(tree, forecasts, bandwidth, step_duration, rho, Some(heap))
}

fn plan_prefetch(
    tree: &CacheTree,
    forecasts: &BTreeMap<WorkflowId, Forecast>,
    bandwidth: usize,
    step_duration: usize,
    rho: f64,
    heap: Option<&ScoreHeap>,
) -> Result<PrefetchPlan, PolicyError> {
    let tiers = tree.tiers();
    let mut plan = PrefetchPlan {
        budget_space: tiers.free_device() + tree.retired_device_tokens(),
        budget_bw: bandwidth.saturating_mul(step_duration),
        budget_displace: if heap.is_some() { (rho * tiers.device_capacity as f64).floor() as usize } else { 0 },
        ..PrefetchPlan::default()
    };
    let budget = plan.budget();
    if budget == 0 {
        return Ok(plan);
    }

    struct Entry(f64, Reverse<NodeId>);
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0).then_with(|| self.1.cmp(&other.1))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl PartialEq for Entry {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other).is_eq()
        }
    }
    impl Eq for Entry {}

    let host_children = |id: NodeId| {
        tree.node(id)
            .children
            .values()
            .copied()
            .filter(|&c| tree.node(c).tier == Tier::Host)
            .collect::<Vec<_>>()
    };
    let mut frontier = BinaryHeap::new();
    let push = |frontier: &mut BinaryHeap<Entry>, id: NodeId| -> Result<(), PolicyError> {
        let value = node_value(tree, id, forecasts)?;
        if value > 0.0 {
            frontier.push(Entry(value, Reverse(id)));
        }
        Ok(())
    };
    for n in tree.nodes().filter(|n| n.tier == Tier::Device) {
        for c in host_children(n.id) {
            push(&mut frontier, c)?;
        }
    }
    for c in host_children(ROOT) {
        push(&mut frontier, c)?;
    }

    let mut left = budget;
    while let Some(Entry(value, Reverse(id))) = frontier.pop() {
        let tokens = tree.node(id).token_len();
        plan.candidates.push(PrefetchCandidate { node: id, value, tokens });
        if tokens <= left {
            left -= tokens;
            plan.selected.push(id);
            plan.selected_tokens += tokens;
            for c in host_children(id) {
                push(&mut frontier, c)?;
            }
        }
    }

    // Make room: free space first, then retired nodes, then (aggressive only)
    // active nodes, never touching the parents the selection relies on.
    loop {
        let need = plan.selected_tokens.saturating_sub(tiers.free_device());
        let retired = select_in_order(tree, need, retired_order(tree));
        let mut displaced = retired.victims.clone();
        let mut short = retired.shortfall;
        if short && plan.budget_displace > 0 {
            let rest = need - retired.freed;
            if rest <= plan.budget_displace {
                let protected = ancestors(tree, &plan.selected);
                let order = heap
                    .expect("displacement implies a heap")
                    .ascending()
                    .map(|k| k.node)
                    .filter(|id| !protected.contains(id));
                let active = select_after(tree, rest, &displaced, order);
                if !active.shortfall {
                    displaced.extend(active.victims);
                    short = false;
                }
            }
        }
        if !short || plan.selected.is_empty() {
            if short {
                plan.selected_tokens = 0;
            }
            plan.displaced = if short { Vec::new() } else { displaced };
            break;
        }
        // Cannot make room for everything; give up the lowest-value pick.
        let dropped = plan.selected.pop().expect("non-empty");
        plan.selected_tokens -= tree.node(dropped).token_len();
    }
    Ok(plan)
}

/// Every device ancestor of the given nodes.
fn ancestors(tree: &CacheTree, nodes: &[NodeId]) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for &id in nodes {
        let mut cur = tree.node(id).parent;
        while let Some(p) = cur.filter(|&p| p != ROOT) {
            if !out.insert(p) {
                break;
            }
            cur = tree.node(p).parent;
        }
    }
    out
}
