//! Global call graph: agents, admissible transitions, and the ground-truth
//! step kernel that drives workflow generation.
//!
//! A workflow is one walk over the graph. The kernel maps a context (the
//! last few invoked agents) to a distribution over the next agent or `END`.
//! Lookups back off to the longest context suffix that has a row, so a
//! first-order graph only needs one row per agent.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{propagate, Forecast};

/// Name reserved for the terminal outcome in graph documents.
pub const END_NAME: &str = "END";

/// Hard cap on workflow length when a graph document omits `max_steps`.
pub const DEFAULT_MAX_STEPS: usize = 64;

/// Agent masks are a single machine word.
pub const MAX_AGENTS: usize = 64;

const ROW_TOLERANCE: f64 = 1e-6;

/// Dense agent index. `END` is represented by the index one past the last agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl AgentId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type WorkflowId = u64;

/// Set of agents, one bit per agent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentMask(pub u64);

impl AgentMask {
    pub const EMPTY: AgentMask = AgentMask(0);

    pub fn single(agent: AgentId) -> Self {
        debug_assert!(agent.0 < MAX_AGENTS);
        AgentMask(1u64 << agent.0)
    }

    pub fn from_agents<I: IntoIterator<Item = AgentId>>(agents: I) -> Self {
        agents.into_iter().fold(Self::EMPTY, |m, a| m.with(a))
    }

    pub fn with(self, agent: AgentId) -> Self {
        AgentMask(self.0 | Self::single(agent).0)
    }

    pub fn insert(&mut self, agent: AgentId) {
        *self = self.with(agent);
    }

    pub fn contains(self, agent: AgentId) -> bool {
        agent.0 < MAX_AGENTS && self.0 & (1u64 << agent.0) != 0
    }

    pub fn contains_index(self, index: usize) -> bool {
        index < MAX_AGENTS && self.0 & (1u64 << index) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn union(self, other: AgentMask) -> AgentMask {
        AgentMask(self.0 | other.0)
    }

    pub fn is_subset_of(self, other: AgentMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = AgentId> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            (bits != 0).then(|| {
                let i = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                AgentId(i)
            })
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph has no agents")]
    NoAgents,
    #[error("graph has {0} agents; at most {MAX_AGENTS} are supported")]
    TooManyAgents(usize),
    #[error("duplicate agent name `{0}`")]
    DuplicateAgent(String),
    #[error("`{END_NAME}` is reserved and cannot name an agent")]
    ReservedName,
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
    #[error("kernel row for context {context:?} sums to {sum}, not 1")]
    NonStochasticRow { context: Vec<String>, sum: f64 },
    #[error("kernel row for context {context:?} has invalid probability {value} for `{target}`")]
    InvalidProbability { context: Vec<String>, target: String, value: f64 },
    #[error("kernel row for context {context:?} is declared twice")]
    DuplicateRow { context: Vec<String> },
    #[error("kernel row for context {0:?} has an empty context")]
    EmptyContext(Vec<String>),
    #[error("kernel uses transition {from} -> {to}, which is not a declared edge")]
    EdgeAbsent { from: String, to: String },
    #[error("agent `{0}` has no first-order kernel row")]
    MissingRow(String),
    #[error("entry distribution sums to {0}, not 1")]
    NonStochasticEntry(f64),
    #[error("max_steps must be at least 1")]
    ZeroMaxSteps,
    #[error("agent `{agent}` cannot reach END within {max_steps} steps")]
    EndUnreachable { agent: String, max_steps: usize },
    #[error("invalid prefix: {0}")]
    InvalidPrefix(String),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
}

/// One kernel row of a graph document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelRowSpec {
    pub context: Vec<String>,
    pub next: BTreeMap<String, f64>,
}

/// JSON-compatible graph document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub agents: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub kernel: Vec<KernelRowSpec>,
    pub entry: BTreeMap<String, f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

/// A validated call graph. Immutable once built.
#[derive(Clone, Debug)]
pub struct CallGraph {
    names: Vec<String>,
    edges: BTreeSet<(usize, usize)>,
    kernel: BTreeMap<Vec<usize>, Vec<f64>>,
    context_order: usize,
    entry: Vec<f64>,
    max_steps: usize,
}

/// Ordered agent invocations of one workflow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowTrace {
    pub workflow_id: WorkflowId,
    pub invocations: Vec<AgentId>,
    /// False when the trace was cut at `max_steps` instead of drawing `END`.
    pub terminated: bool,
}

impl CallGraph {
    /// Validates a graph document. Rows within 1e-6 of stochastic are renormalized.
    pub fn from_spec(spec: &GraphSpec) -> Result<Self, GraphError> {
        let n = spec.agents.len();
        if n == 0 {
            return Err(GraphError::NoAgents);
        }
        if n > MAX_AGENTS {
            return Err(GraphError::TooManyAgents(n));
        }
        let mut index = BTreeMap::new();
        for (i, name) in spec.agents.iter().enumerate() {
            if name == END_NAME {
                return Err(GraphError::ReservedName);
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(GraphError::DuplicateAgent(name.clone()));
            }
        }
        let lookup = |name: &str| -> Result<usize, GraphError> {
            index.get(name).copied().ok_or_else(|| GraphError::UnknownAgent(name.to_string()))
        };

        let mut edges = BTreeSet::new();
        for (from, to) in &spec.edges {
            edges.insert((lookup(from)?, lookup(to)?));
        }

        let mut kernel = BTreeMap::new();
        let mut context_order = 1;
        for row in &spec.kernel {
            if row.context.is_empty() {
                return Err(GraphError::EmptyContext(row.context.clone()));
            }
            let context = row.context.iter().map(|a| lookup(a)).collect::<Result<Vec<_>, _>>()?;
            for pair in context.windows(2) {
                if !edges.contains(&(pair[0], pair[1])) {
                    return Err(GraphError::EdgeAbsent {
                        from: spec.agents[pair[0]].clone(),
                        to: spec.agents[pair[1]].clone(),
                    });
                }
            }
            let last = *context.last().unwrap();
            let mut probs = vec![0.0; n + 1];
            for (target, &p) in &row.next {
                if !p.is_finite() || p < 0.0 {
                    return Err(GraphError::InvalidProbability {
                        context: row.context.clone(),
                        target: target.clone(),
                        value: p,
                    });
                }
                let slot = if target == END_NAME { n } else { lookup(target)? };
                if slot < n && p > 0.0 && !edges.contains(&(last, slot)) {
                    return Err(GraphError::EdgeAbsent {
                        from: spec.agents[last].clone(),
                        to: target.clone(),
                    });
                }
                probs[slot] += p;
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(GraphError::NonStochasticRow { context: row.context.clone(), sum });
            }
            probs.iter_mut().for_each(|p| *p /= sum);
            context_order = context_order.max(context.len());
            if kernel.insert(context, probs).is_some() {
                return Err(GraphError::DuplicateRow { context: row.context.clone() });
            }
        }
        for (i, name) in spec.agents.iter().enumerate() {
            if !kernel.contains_key(&vec![i]) {
                return Err(GraphError::MissingRow(name.clone()));
            }
        }

        let mut entry = vec![0.0; n];
        for (name, &p) in &spec.entry {
            if !p.is_finite() || p < 0.0 {
                return Err(GraphError::InvalidProbability {
                    context: vec![],
                    target: name.clone(),
                    value: p,
                });
            }
            entry[lookup(name)?] += p;
        }
        let entry_sum: f64 = entry.iter().sum();
        if (entry_sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(GraphError::NonStochasticEntry(entry_sum));
        }
        entry.iter_mut().for_each(|p| *p /= entry_sum);

        if spec.max_steps == 0 {
            return Err(GraphError::ZeroMaxSteps);
        }

        let graph = CallGraph {
            names: spec.agents.clone(),
            edges,
            kernel,
            context_order,
            entry,
            max_steps: spec.max_steps,
        };
        graph.check_end_reachable()?;
        Ok(graph)
    }

    /// Checks that every agent reachable from the entry distribution can reach
    /// `END` within `max_steps` invocations, on the first-order projection of
    /// the kernel support.
    fn check_end_reachable(&self) -> Result<(), GraphError> {
        let n = self.num_agents();
        let mut succ = vec![BTreeSet::new(); n];
        let mut ends = vec![false; n];
        for (ctx, row) in &self.kernel {
            let last = *ctx.last().unwrap();
            for (j, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    if j == n {
                        ends[last] = true;
                    } else {
                        succ[last].insert(j);
                    }
                }
            }
        }

        let mut reachable = vec![false; n];
        let mut queue: VecDeque<usize> =
            (0..n).filter(|&i| self.entry[i] > 0.0).collect();
        for &i in &queue {
            reachable[i] = true;
        }
        while let Some(a) = queue.pop_front() {
            for &b in &succ[a] {
                if !reachable[b] {
                    reachable[b] = true;
                    queue.push_back(b);
                }
            }
        }

        // Invocations needed to end, counting the agent itself.
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for a in 0..n {
            if ends[a] {
                dist[a] = 1;
                queue.push_back(a);
            }
        }
        while let Some(b) = queue.pop_front() {
            for a in 0..n {
                if dist[a] == usize::MAX && succ[a].contains(&b) {
                    dist[a] = dist[b] + 1;
                    queue.push_back(a);
                }
            }
        }
        for a in 0..n {
            if reachable[a] && dist[a] > self.max_steps {
                return Err(GraphError::EndUnreachable {
                    agent: self.names[a].clone(),
                    max_steps: self.max_steps,
                });
            }
        }
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.names.len()
    }

    /// Number of outcomes per forecast step: every agent plus `END`.
    pub fn num_outcomes(&self) -> usize {
        self.names.len() + 1
    }

    pub fn end_index(&self) -> usize {
        self.names.len()
    }

    pub fn agent_name(&self, agent: AgentId) -> &str {
        &self.names[agent.0]
    }

    pub fn agent_names(&self) -> &[String] {
        &self.names
    }

    pub fn agent_by_name(&self, name: &str) -> Option<AgentId> {
        self.names.iter().position(|n| n == name).map(AgentId)
    }

    pub fn edges(&self) -> impl Iterator<Item = (AgentId, AgentId)> + '_ {
        self.edges.iter().map(|&(a, b)| (AgentId(a), AgentId(b)))
    }

    pub fn has_edge(&self, from: AgentId, to: AgentId) -> bool {
        self.edges.contains(&(from.0, to.0))
    }

    /// Returns true if the graph admits a cycle among its declared edges.
    pub fn has_cycle(&self) -> bool {
        let n = self.num_agents();
        let mut indegree = vec![0usize; n];
        for &(_, b) in &self.edges {
            indegree[b] += 1;
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(a) = queue.pop_front() {
            seen += 1;
            for &(x, b) in self.edges.range((a, 0)..(a + 1, 0)) {
                debug_assert_eq!(x, a);
                indegree[b] -= 1;
                if indegree[b] == 0 {
                    queue.push_back(b);
                }
            }
        }
        seen < n
    }

    pub fn entry_distribution(&self) -> &[f64] {
        &self.entry
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    /// Longest context length used by any kernel row.
    pub fn context_order(&self) -> usize {
        self.context_order
    }

    /// The kernel row for the longest suffix of `history` that has one.
    pub fn transition_row(&self, history: &[AgentId]) -> Result<&[f64], GraphError> {
        let ctx: Vec<usize> = history.iter().map(|a| a.0).collect();
        self.row_for(&ctx)
            .ok_or_else(|| GraphError::InvalidPrefix("empty history".into()))
    }

    pub(crate) fn row_for(&self, history: &[usize]) -> Option<&[f64]> {
        let max_len = self.context_order.min(history.len());
        (1..=max_len).rev().find_map(|len| {
            self.kernel
                .get(&history[history.len() - len..])
                .map(Vec::as_slice)
        })
    }

    /// Checks that `prefix` is non-empty, within `max_steps`, and walks declared edges.
    pub fn validate_prefix(&self, prefix: &[AgentId]) -> Result<(), GraphError> {
        if prefix.is_empty() {
            return Err(GraphError::InvalidPrefix("prefix is empty".into()));
        }
        if prefix.len() > self.max_steps {
            return Err(GraphError::InvalidPrefix(format!(
                "prefix length {} exceeds max_steps {}",
                prefix.len(),
                self.max_steps
            )));
        }
        if let Some(a) = prefix.iter().find(|a| a.0 >= self.num_agents()) {
            return Err(GraphError::InvalidPrefix(format!("agent index {} out of range", a.0)));
        }
        for pair in prefix.windows(2) {
            if !self.has_edge(pair[0], pair[1]) {
                return Err(GraphError::InvalidPrefix(format!(
                    "{} -> {} is not an edge",
                    self.agent_name(pair[0]),
                    self.agent_name(pair[1])
                )));
            }
        }
        Ok(())
    }

    /// Exact per-step marginals over the next `horizon` invocations, each
    /// conditioned on the workflow surviving to that step. Steps past
    /// `max_steps` are degenerate at `END`.
    pub fn true_kstep_marginals(
        &self,
        prefix: &[AgentId],
        horizon: usize,
    ) -> Result<Forecast, GraphError> {
        if horizon == 0 {
            return Err(GraphError::ZeroHorizon);
        }
        self.validate_prefix(prefix)?;
        let history: Vec<usize> = prefix.iter().map(|a| a.0).collect();
        let steps = propagate(
            &history,
            horizon,
            self.context_order,
            self.num_agents(),
            Some(self.max_steps),
            |ctx| self.row_for(ctx).expect("every agent has a first-order row").to_vec(),
        );
        Ok(Forecast::new(self.num_agents(), steps).expect("propagation yields valid forecasts"))
    }

    fn sample_outcome<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Rounding left a sliver of mass; fall back to the last supported outcome.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }

    /// Draws the entry agent then kernel steps until `END` or `max_steps`.
    pub fn sample_workflow(&self, workflow_id: WorkflowId, seed: u64) -> WorkflowTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_workflow_with(workflow_id, &mut rng)
    }

    pub fn sample_workflow_with<R: Rng>(&self, workflow_id: WorkflowId, rng: &mut R) -> WorkflowTrace {
        let first = Self::sample_outcome(&self.entry, rng);
        let mut history = vec![first];
        let mut terminated = false;
        while history.len() < self.max_steps {
            let row = self.row_for(&history).expect("first-order row exists");
            let next = Self::sample_outcome(row, rng);
            if next == self.end_index() {
                terminated = true;
                break;
            }
            history.push(next);
        }
        WorkflowTrace {
            workflow_id,
            invocations: history.into_iter().map(AgentId).collect(),
            terminated,
        }
    }

    /// Samples up to `steps` further invocations after `prefix`. `None` marks
    /// that the workflow has ended (by `END` or by the step cap) at that step.
    pub fn sample_continuation<R: Rng>(
        &self,
        prefix: &[AgentId],
        steps: usize,
        rng: &mut R,
    ) -> Vec<Option<AgentId>> {
        let mut history: Vec<usize> = prefix.iter().map(|a| a.0).collect();
        let mut out = Vec::with_capacity(steps);
        let mut ended = false;
        for _ in 0..steps {
            if !ended && history.len() >= self.max_steps {
                ended = true;
            }
            if !ended {
                let row = self.row_for(&history).expect("first-order row exists");
                let next = Self::sample_outcome(row, rng);
                if next == self.end_index() {
                    ended = true;
                } else {
                    history.push(next);
                    out.push(Some(AgentId(next)));
                    continue;
                }
            }
            out.push(None);
        }
        out
    }

    /// Deterministic graphs: a single entry agent and every row a point mass.
    pub fn is_static(&self) -> bool {
        let point_mass = |p: &[f64]| p.iter().filter(|&&x| x > 0.0).count() == 1;
        point_mass(&self.entry) && self.kernel.values().all(|row| point_mass(row))
    }

    /// The fixed invocation order of a static graph, capped at `max_steps`.
    pub fn static_sequence(&self) -> Option<Vec<AgentId>> {
        if !self.is_static() {
            return None;
        }
        // Any seed gives the same walk on a static graph.
        Some(self.sample_workflow(0, 0).invocations)
    }
}

/// Writes traces as `workflow_id,step,agent_id` lines under a header.
pub fn write_traces_csv<W: Write>(traces: &[WorkflowTrace], mut out: W) -> io::Result<()> {
    writeln!(out, "workflow_id,step,agent_id")?;
    for trace in traces {
        for (step, agent) in trace.invocations.iter().enumerate() {
            writeln!(out, "{},{},{}", trace.workflow_id, step, agent.0)?;
        }
    }
    Ok(())
}
