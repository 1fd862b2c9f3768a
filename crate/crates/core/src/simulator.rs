//! Step-based simulation of concurrent workflows sharing one two-tier cache.
//!
//! One simulated step is one decode step. Each workflow follows a trace
//! sampled from the call graph; between invocations it waits a sampled
//! number of steps (tool calls and the like). An invocation prefills its
//! prompt in the step it starts and then decodes for a fixed number of
//! steps, with its cache path locked. Its output is inserted when it
//! completes. Admission is closed-loop: a new workflow enters whenever one
//! terminates, until the pool is used up.
//!
//! Prompts are built per agent: `shared prefix + agent description + task +
//! every earlier output of the workflow`. An agent invoked again therefore
//! finds its own earlier prompt and output as a prefix, while different
//! agents of one workflow only share the global part.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, CacheTree, NodeId, Tier, Token, ROOT};
use crate::callgraph::{AgentId, CallGraph, GraphError, GraphSpec, WorkflowId};
use crate::policies::{
    plan_aggressive_prefetch, plan_conservative_prefetch, select_victims, EvictionPolicy, PolicyError,
};
use crate::predictor::{markov_predict, noisy_predict, oracle_predict, train_markov, Forecast, MarkovModel, PredictError};
use crate::scoring::{node_score, refresh_scores, ScoreError, ScoreHeap, ScoreParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("event log is empty")]
    EmptyLog,
    #[error("replay diverged at event {index}: {reason}")]
    Replay { index: usize, reason: String },
    #[error("audit failed at step {step}: {reason}")]
    Audit { step: u64, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub prefill_per_token: f64,
    pub pcie_per_token: f64,
    pub decode_step_cost: f64,
    pub decode_steps_per_invocation: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { prefill_per_token: 1.0, pcie_per_token: 0.1, decode_step_cost: 1.0, decode_steps_per_invocation: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptModel {
    /// System prompt shared by every invocation.
    pub shared_prefix_tokens: usize,
    /// Per-agent description, shared across workflows.
    pub agent_description_tokens: usize,
    /// Workflow-specific task text.
    pub task_tokens: usize,
    /// Tokens produced by each invocation.
    pub per_agent_output_tokens: usize,
    /// Output sizes for particular agents, by name.
    #[serde(default)]
    pub output_tokens_by_agent: BTreeMap<String, usize>,
    #[serde(default)]
    pub layout: PromptLayout,
}

/// Order of the parts of a prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptLayout {
    /// Shared prefix, agent description, then the workflow context. Each
    /// agent keeps its own copy of the context and a re-invoked agent hits
    /// its own earlier prompt.
    #[default]
    AgentFirst,
    /// Shared prefix, the workflow context, then the agent description.
    /// Every invocation of a workflow extends the same context.
    AgentLast,
}

impl Default for PromptModel {
    fn default() -> Self {
        PromptModel {
            shared_prefix_tokens: 600,
            agent_description_tokens: 100,
            task_tokens: 60,
            per_agent_output_tokens: 40,
            output_tokens_by_agent: BTreeMap::new(),
            layout: PromptLayout::AgentFirst,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PredictorConfig {
    Oracle,
    Noisy { lambda: f64 },
    Markov { order: usize, alpha: f64, training_workflows: usize },
}

impl PredictorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PredictorConfig::Oracle => "oracle",
            PredictorConfig::Noisy { .. } => "noisy",
            PredictorConfig::Markov { .. } => "markov",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum PrefetchMode {
    Off,
    Conservative,
    Aggressive { rho: f64 },
}

impl PrefetchMode {
    pub fn name(&self) -> &'static str {
        match self {
            PrefetchMode::Off => "off",
            PrefetchMode::Conservative => "conservative",
            PrefetchMode::Aggressive { .. } => "aggressive",
        }
    }
}

fn default_window() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub graph: GraphSpec,
    pub num_workflows: usize,
    pub concurrency_limit: usize,
    pub device_capacity: usize,
    pub host_capacity: usize,
    pub policy: EvictionPolicy,
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub score: ScoreParams,
    pub prefetch: PrefetchMode,
    /// Host-to-device tokens per step available to prefetch.
    pub bandwidth: usize,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub prompt: PromptModel,
    /// Idle steps before each invocation are drawn from `0..=tool_gap_max`.
    pub tool_gap_max: usize,
    pub seed: u64,
    /// Invocations per time-series window.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Audit the tree and heap after every event. Slow.
    #[serde(default)]
    pub audit: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<CallGraph, SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        let graph = CallGraph::from_spec(&self.graph)?;
        if self.num_workflows == 0 {
            return bad("num_workflows must be positive".into());
        }
        if self.concurrency_limit == 0 {
            return bad("concurrency_limit must be positive".into());
        }
        let c = &self.cost;
        if !(c.pcie_per_token >= 0.0 && c.pcie_per_token < c.prefill_per_token) {
            return bad(format!(
                "pcie_per_token ({}) must be non-negative and below prefill_per_token ({})",
                c.pcie_per_token, c.prefill_per_token
            ));
        }
        if c.decode_step_cost.is_nan() || c.decode_step_cost < 0.0 || c.decode_steps_per_invocation == 0 {
            return bad("decode cost must be non-negative and decode steps positive".into());
        }
        let p = &self.prompt;
        if self.device_capacity <= p.shared_prefix_tokens || self.host_capacity <= p.shared_prefix_tokens {
            return bad(format!(
                "capacities ({} device, {} host) must exceed the shared prefix ({})",
                self.device_capacity, self.host_capacity, p.shared_prefix_tokens
            ));
        }
        if p.shared_prefix_tokens + p.agent_description_tokens + p.task_tokens == 0 || p.per_agent_output_tokens == 0 {
            return bad("prompts and outputs must be non-empty".into());
        }
        for (name, &n) in &p.output_tokens_by_agent {
            if graph.agent_by_name(name).is_none() {
                return bad(format!("output size given for unknown agent {name:?}"));
            }
            if n == 0 {
                return bad(format!("agent {name:?} must produce at least one token"));
            }
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        self.score.validate()?;
        match self.predictor {
            PredictorConfig::Noisy { lambda } if !(0.0..=1.0).contains(&lambda) => {
                return Err(PredictError::LambdaOutOfRange(lambda).into());
            }
            PredictorConfig::Markov { order, alpha, training_workflows } => {
                if order == 0 {
                    return Err(PredictError::ZeroOrder.into());
                }
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(PredictError::InvalidAlpha(alpha).into());
                }
                if training_workflows == 0 {
                    return Err(PredictError::EmptyCorpus.into());
                }
            }
            _ => {}
        }
        if let PrefetchMode::Aggressive { rho } = self.prefetch {
            if !(0.0..=1.0).contains(&rho) {
                return Err(PolicyError::Rho(rho).into());
            }
        }
        if self.policy == EvictionPolicy::Kvflow && !graph.is_static() {
            return bad("the kvflow policy needs a static graph".into());
        }
        let layout = TokenLayout::new(p, &graph, self.num_workflows);
        if layout.end > u64::from(Token::MAX) {
            return bad("token id space exhausted; reduce workflows or prompt sizes".into());
        }
        Ok(graph)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvocationCost {
    pub ttft: f64,
    pub total: f64,
}

/// Device hits are free; host hits pay the transfer, misses pay prefill.
pub fn invocation_cost(_device_hit: usize, host_hit: usize, miss: usize, decode_steps: usize, cost: &CostModel) -> InvocationCost {
    let ttft = host_hit as f64 * cost.pcie_per_token + miss as f64 * cost.prefill_per_token;
    InvocationCost { ttft, total: ttft + decode_steps as f64 * cost.decode_step_cost }
}

/// A run of consecutive token ids: `(first, len)`.
pub type Segment = (Token, u32);

/// Device hits, host hits and misses, in tokens.
type HitSplit = (usize, usize, usize);

pub fn expand(segments: &[Segment]) -> Vec<Token> {
    segments.iter().flat_map(|&(start, len)| start..start + len).collect()
}

/// Where each prompt part lives in token-id space.
#[derive(Clone, Debug)]
struct TokenLayout {
    shared: usize,
    description: usize,
    task: usize,
    outputs: Vec<usize>,
    order: PromptLayout,
    workflow_base: u64,
    stride: u64,
    end: u64,
}

impl TokenLayout {
    fn new(prompt: &PromptModel, graph: &CallGraph, num_workflows: usize) -> Self {
        let outputs: Vec<usize> = graph
            .agent_names()
            .iter()
            .map(|n| prompt.output_tokens_by_agent.get(n).copied().unwrap_or(prompt.per_agent_output_tokens))
            .collect();
        let largest = outputs.iter().copied().max().unwrap_or(0);
        let workflow_base = (prompt.shared_prefix_tokens + graph.num_agents() * prompt.agent_description_tokens) as u64;
        let stride = (prompt.task_tokens + graph.max_steps() * largest) as u64;
        TokenLayout {
            shared: prompt.shared_prefix_tokens,
            description: prompt.agent_description_tokens,
            task: prompt.task_tokens,
            outputs,
            order: prompt.layout,
            workflow_base,
            stride,
            end: workflow_base + stride * num_workflows as u64,
        }
    }

    fn push(out: &mut Vec<Segment>, start: u64, len: usize) {
        if len > 0 {
            out.push((start as Token, len as u32));
        }
    }

    /// `history` is the number of output tokens the workflow produced so far.
    fn prompt(&self, wf: WorkflowId, agent: AgentId, history: usize) -> Vec<Segment> {
        let mut out = Vec::new();
        let description = (self.shared + agent.0 * self.description) as u64;
        Self::push(&mut out, 0, self.shared);
        // Task and earlier outputs are one contiguous run.
        match self.order {
            PromptLayout::AgentFirst => {
                Self::push(&mut out, description, self.description);
                Self::push(&mut out, self.workflow_base + wf * self.stride, self.task + history);
            }
            PromptLayout::AgentLast => {
                Self::push(&mut out, self.workflow_base + wf * self.stride, self.task + history);
                Self::push(&mut out, description, self.description);
            }
        }
        out
    }

    fn output(&self, wf: WorkflowId, agent: AgentId, history: usize) -> Segment {
        let start = self.workflow_base + wf * self.stride + (self.task + history) as u64;
        (start as Token, self.outputs[agent.0] as u32)
    }

    fn output_len(&self, agent: AgentId) -> usize {
        self.outputs[agent.0]
    }
}

/// Typed record of everything that happened in a run. Events marked as
/// tree operations are enough to rebuild the final cache state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Admit { step: u64, wf: WorkflowId },
    /// Tree operation: prefix lookup with tagging.
    Match { step: u64, wf: WorkflowId, agent: AgentId, seq: Vec<Segment> },
    /// Tree operation: suffix insertion.
    Insert { step: u64, wf: WorkflowId, agent: AgentId, seq: Vec<Segment> },
    Invoke {
        step: u64,
        wf: WorkflowId,
        agent: AgentId,
        index: usize,
        device_hit: usize,
        host_hit: usize,
        miss: usize,
        ttft: f64,
    },
    Evict { step: u64, needed: usize, freed: usize, victims: usize, shortfall: bool },
    /// Tree operation: device to host; `dropped` if the host had no room.
    Demote { step: u64, node: NodeId, dropped: bool },
    /// Tree operation: removal of a node and its subtree.
    Drop { step: u64, node: NodeId },
    /// Tree operation: host to device.
    Promote { step: u64, node: NodeId, prefetch: bool },
    Prefetch { step: u64, selected: usize, tokens: usize, displaced: usize },
    Complete { step: u64, wf: WorkflowId, agent: AgentId, index: usize },
    /// Tree operation: workflow termination.
    Terminate { step: u64, wf: WorkflowId, retired: usize },
    /// First eviction after a termination that found no retired cache left.
    RetiredDrained { step: u64 },
    /// The last workflow of the pool was admitted.
    PoolExhausted { step: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub token_hit_rate: f64,
    pub prompt_tokens: u64,
    pub device_hit_tokens: u64,
    pub host_hit_tokens: u64,
    pub miss_tokens: u64,
    pub avg_workflow_latency: f64,
    pub avg_ttft: f64,
    /// Mean time-to-first-token by agent name, for agents that ran.
    pub per_agent_ttft: BTreeMap<String, f64>,
    pub invocations: u64,
    pub workflows: u64,
    pub steps: u64,
    pub evictions: u64,
    pub evicted_tokens: u64,
    pub demotions: u64,
    pub drops: u64,
    pub prefetches: u64,
    pub prefetched_tokens: u64,
    pub max_prefetch_tokens_per_step: usize,
    pub shortfalls: u64,
    pub max_active_workflows: usize,
    pub peak_device_used: usize,
    pub first_eviction_step: Option<u64>,
    pub first_termination_step: Option<u64>,
    pub retired_drained_step: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub metrics: SimMetrics,
    pub events: Vec<Event>,
    pub tree: CacheTree,
}

enum ActivePredictor<'g> {
    Oracle(&'g CallGraph),
    Noisy(&'g CallGraph, f64),
    Markov(MarkovModel),
}

impl ActivePredictor<'_> {
    fn forecast(&self, prefix: &[AgentId], horizon: usize) -> Result<Forecast, PredictError> {
        match self {
            ActivePredictor::Oracle(g) => oracle_predict(g, prefix, horizon),
            ActivePredictor::Noisy(g, lambda) => noisy_predict(&oracle_predict(g, prefix, horizon)?, *lambda),
            ActivePredictor::Markov(m) => markov_predict(m, prefix, horizon),
        }
    }
}

struct Running {
    index: usize,
    history: usize,
    agent: AgentId,
    prompt: Vec<Segment>,
    /// Deepest locked node, if the prompt made it into the cache.
    locked: Option<NodeId>,
    done_at: u64,
}

struct Flow {
    trace: Vec<AgentId>,
    gaps: Vec<usize>,
    next: usize,
    history: usize,
    ready_at: u64,
    running: Option<Running>,
    latency: f64,
}

struct Sim<'g> {
    cfg: &'g SimConfig,
    graph: &'g CallGraph,
    layout: TokenLayout,
    tree: CacheTree,
    heap: ScoreHeap,
    use_scores: bool,
    predictor: Option<ActivePredictor<'g>>,
    forecasts: BTreeMap<WorkflowId, Forecast>,
    pool: Vec<(Vec<AgentId>, Vec<usize>)>,
    admitted: usize,
    active: BTreeMap<WorkflowId, Flow>,
    events: Vec<Event>,
    m: SimMetrics,
    ttft_by_agent: BTreeMap<usize, (f64, u64)>,
    latency_sum: f64,
    ttft_sum: f64,
    step: u64,
    /// When set, track the working set over this many steps.
    working_set_window: Option<u64>,
    /// Tree clock at the end of each step.
    clock_at_step: Vec<u64>,
    peak_working_set: usize,
}

/// Runs one simulation. Deterministic in the config.
pub fn run(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    let graph = cfg.validate()?;
    let mut sim = Sim::new(cfg, &graph)?;
    sim.run()?;
    Ok(sim.finish())
}

/// Peak working set of a workload: the largest number of distinct tokens
/// referenced within any window as long as the mean workflow lifetime, in a
/// run where nothing is ever evicted.
pub fn peak_working_set(cfg: &SimConfig) -> Result<usize, SimError> {
    let mut unbounded = cfg.clone();
    unbounded.device_capacity = usize::MAX / 4;
    unbounded.host_capacity = usize::MAX / 4;
    unbounded.policy = EvictionPolicy::Lru;
    unbounded.prefetch = PrefetchMode::Off;
    unbounded.audit = false;
    let graph = unbounded.validate()?;
    let mut sim = Sim::new(&unbounded, &graph)?;
    sim.run()?;
    let mut admitted = BTreeMap::new();
    let mut lifetimes = Vec::new();
    for e in &sim.events {
        match *e {
            Event::Admit { step, wf } => {
                admitted.insert(wf, step);
            }
            Event::Terminate { step, wf, .. } => lifetimes.push(step - admitted[&wf]),
            _ => {}
        }
    }
    let window = (lifetimes.iter().sum::<u64>() / (2 * lifetimes.len().max(1) as u64)).max(1);
    let mut sim = Sim::new(&unbounded, &graph)?;
    sim.working_set_window = Some(window);
    sim.run()?;
    Ok(sim.peak_working_set)
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<'g> Sim<'g> {
    fn new(cfg: &'g SimConfig, graph: &'g CallGraph) -> Result<Self, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
        let pool = (0..cfg.num_workflows as WorkflowId)
            .map(|wf| {
                let trace = graph.sample_workflow_with(wf, &mut rng).invocations;
                let gaps = trace.iter().map(|_| rng.gen_range(0..=cfg.tool_gap_max)).collect();
                (trace, gaps)
            })
            .collect();
        let use_scores =
            cfg.policy.uses_scores() || matches!(cfg.prefetch, PrefetchMode::Aggressive { .. });
        let needs_forecasts = use_scores || cfg.prefetch != PrefetchMode::Off;
        let predictor = if !needs_forecasts {
            None
        } else {
            Some(match cfg.predictor {
                PredictorConfig::Oracle => ActivePredictor::Oracle(graph),
                PredictorConfig::Noisy { lambda } => ActivePredictor::Noisy(graph, lambda),
                PredictorConfig::Markov { order, alpha, training_workflows } => {
                    // Training traces come from their own stream, never the workload's.
                    let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
                    let traces: Vec<_> = (0..training_workflows as WorkflowId)
                        .map(|wf| graph.sample_workflow_with(wf, &mut trng))
                        .collect();
                    ActivePredictor::Markov(train_markov(&traces, graph.num_agents(), order, alpha)?)
                }
            })
        };
        Ok(Sim {
            cfg,
            graph,
            layout: TokenLayout::new(&cfg.prompt, graph, cfg.num_workflows),
            tree: CacheTree::new(cfg.device_capacity, cfg.host_capacity),
            heap: ScoreHeap::new(),
            use_scores,
            predictor,
            forecasts: BTreeMap::new(),
            pool,
            admitted: 0,
            active: BTreeMap::new(),
            events: Vec::new(),
            m: SimMetrics::default(),
            ttft_by_agent: BTreeMap::new(),
            latency_sum: 0.0,
            ttft_sum: 0.0,
            step: 0,
            working_set_window: None,
            clock_at_step: Vec::new(),
            peak_working_set: 0,
        })
    }

    fn run(&mut self) -> Result<(), SimError> {
        while self.active.len() < self.cfg.concurrency_limit && self.admit() {}
        while !self.active.is_empty() {
            let done: Vec<WorkflowId> = self
                .active
                .iter()
                .filter(|(_, f)| f.running.as_ref().is_some_and(|r| r.done_at == self.step))
                .map(|(&wf, _)| wf)
                .collect();
            for wf in done {
                self.complete(wf)?;
            }
            let ready: Vec<WorkflowId> = self
                .active
                .iter()
                .filter(|(_, f)| f.running.is_none() && f.ready_at <= self.step)
                .map(|(&wf, _)| wf)
                .collect();
            let pure_decode = ready.is_empty();
            for wf in ready {
                self.start(wf)?;
            }
            if pure_decode && self.cfg.prefetch != PrefetchMode::Off {
                self.prefetch()?;
            }
            if !self.use_scores {
                // Nobody consumes the journal; keep it from growing.
                self.tree.take_dirty();
            }
            self.m.peak_device_used = self.m.peak_device_used.max(self.tree.tiers().device_used);
            if let Some(window) = self.working_set_window {
                self.track_working_set(window);
            }
            self.step += 1;
        }
        Ok(())
    }

    fn track_working_set(&mut self, window: u64) {
        self.clock_at_step.push(self.tree.clock());
        let since = self.step.checked_sub(window).map_or(0, |s| self.clock_at_step[s as usize]);
        let size: usize = self.tree.nodes().filter(|n| n.last_access > since).map(|n| n.token_len()).sum();
        self.peak_working_set = self.peak_working_set.max(size);
    }

    fn audit(&mut self) -> Result<(), SimError> {
        if !self.cfg.audit {
            return Ok(());
        }
        let fail = |reason: String, step| SimError::Audit { step, reason };
        self.tree.audit().map_err(|e| fail(e.to_string(), self.step))?;
        let t = self.tree.tiers();
        if t.device_used > t.device_capacity || t.host_used > t.host_capacity {
            return Err(fail(format!("tier overflow {t:?}"), self.step));
        }
        if self.active.len() > self.cfg.concurrency_limit {
            return Err(fail("concurrency limit exceeded".into(), self.step));
        }
        if self.use_scores {
            self.heap.sync(&mut self.tree);
            self.heap.audit().map_err(|e| fail(e, self.step))?;
            for n in self.tree.nodes() {
                let want = node_score(&self.tree, n.id, &self.forecasts, self.cfg.score)?;
                if (want - n.score).abs() > 1e-12 {
                    return Err(fail(format!("node {} score {} is stale, expected {want}", n.id, n.score), self.step));
                }
            }
            let fresh = ScoreHeap::rebuild(&self.tree);
            if fresh.sorted_keys() != self.heap.sorted_keys() {
                return Err(fail("score heap differs from a rebuild".into(), self.step));
            }
        }
        Ok(())
    }

    fn admit(&mut self) -> bool {
        if self.admitted == self.pool.len() {
            return false;
        }
        let wf = self.admitted as WorkflowId;
        let (trace, gaps) = std::mem::take(&mut self.pool[self.admitted]);
        self.admitted += 1;
        let ready_at = self.step + gaps[0] as u64;
        self.active.insert(wf, Flow { trace, gaps, next: 0, history: 0, ready_at, running: None, latency: 0.0 });
        self.events.push(Event::Admit { step: self.step, wf });
        if self.admitted == self.pool.len() {
            self.events.push(Event::PoolExhausted { step: self.step });
        }
        self.m.max_active_workflows = self.m.max_active_workflows.max(self.active.len());
        true
    }

    fn refresh(&mut self, wf: WorkflowId, prefix: Option<&[AgentId]>) -> Result<(), SimError> {
        let Some(predictor) = &self.predictor else { return Ok(()) };
        match prefix {
            Some(p) => {
                let f = predictor.forecast(p, self.cfg.score.horizon)?;
                self.forecasts.insert(wf, f);
            }
            None => {
                self.forecasts.remove(&wf);
            }
        }
        refresh_scores(&mut self.tree, wf, &self.forecasts, self.cfg.score, &mut self.heap)?;
        Ok(())
    }

    /// Rescores the nodes `wf` tags without changing its forecast.
    fn rescore(&mut self, wf: WorkflowId) -> Result<(), SimError> {
        if self.predictor.is_some() {
            refresh_scores(&mut self.tree, wf, &self.forecasts, self.cfg.score, &mut self.heap)?;
        }
        Ok(())
    }

    fn start(&mut self, wf: WorkflowId) -> Result<(), SimError> {
        let flow = &self.active[&wf];
        let index = flow.next;
        let agent = flow.trace[index];
        let history = flow.history;
        let prompt = self.layout.prompt(wf, agent, history);
        if index == 0 {
            // Forecasts are otherwise refreshed at completion; a new workflow
            // needs one before it tags anything.
            self.refresh(wf, Some(&[agent]))?;
        }
        let (hits, leaf) = self.make_resident(&prompt, wf, agent)?;
        let (device_hit, host_hit, miss) = hits;
        if let Some(leaf) = leaf {
            self.tree.lock_path(leaf);
        }
        self.rescore(wf)?;
        let decode = self.cfg.cost.decode_steps_per_invocation;
        let cost = invocation_cost(device_hit, host_hit, miss, decode, &self.cfg.cost);
        self.events.push(Event::Invoke { step: self.step, wf, agent, index, device_hit, host_hit, miss, ttft: cost.ttft });
        self.m.invocations += 1;
        self.m.prompt_tokens += (device_hit + host_hit + miss) as u64;
        self.m.device_hit_tokens += device_hit as u64;
        self.m.host_hit_tokens += host_hit as u64;
        self.m.miss_tokens += miss as u64;
        self.ttft_sum += cost.ttft;
        let e = self.ttft_by_agent.entry(agent.0).or_insert((0.0, 0));
        e.0 += cost.ttft;
        e.1 += 1;
        let flow = self.active.get_mut(&wf).expect("active");
        flow.latency += cost.total;
        flow.running = Some(Running { index, history, agent, prompt, locked: leaf, done_at: self.step + decode as u64 });
        self.audit()
    }

    fn complete(&mut self, wf: WorkflowId) -> Result<(), SimError> {
        let flow = self.active.get_mut(&wf).expect("active");
        let run = flow.running.take().expect("running");
        flow.next = run.index + 1;
        flow.history = run.history + self.layout.output_len(run.agent);
        let finished = flow.next == flow.trace.len();
        let prefix = flow.trace[..flow.next].to_vec();
        if !finished {
            flow.ready_at = self.step + 1 + flow.gaps[flow.next] as u64;
        }
        if let Some(leaf) = run.locked {
            self.tree.unlock_path(leaf);
        }
        let mut seq = run.prompt;
        seq.push(self.layout.output(wf, run.agent, run.history));
        self.events.push(Event::Complete { step: self.step, wf, agent: run.agent, index: run.index });
        self.make_resident(&seq, wf, run.agent)?;
        if finished {
            let flow = self.active.remove(&wf).expect("active");
            self.latency_sum += flow.latency;
            self.m.workflows += 1;
            let retired = self.tree.on_workflow_terminated(wf);
            self.events.push(Event::Terminate { step: self.step, wf, retired });
            self.m.first_termination_step.get_or_insert(self.step);
            self.refresh(wf, None)?;
            self.admit();
        } else {
            self.refresh(wf, Some(&prefix))?;
        }
        self.audit()
    }

    /// Looks up `seq`, then brings it fully onto the device: host parts are
    /// reloaded and the missing suffix inserted, evicting as needed. Returns
    /// the lookup counts and the deepest node if everything fit.
    fn make_resident(
        &mut self,
        segments: &[Segment],
        wf: WorkflowId,
        agent: AgentId,
    ) -> Result<(HitSplit, Option<NodeId>), SimError> {
        let tokens = expand(segments);
        let m = self.tree.match_prefix(&tokens, wf, agent);
        self.events.push(Event::Match { step: self.step, wf, agent, seq: segments.to_vec() });
        let hits = (m.device_hit, m.host_hit, m.miss);
        let pinned = m.path.last().copied();
        if let Some(p) = pinned {
            self.tree.lock_path(p);
        }
        let need = m.host_hit + m.miss;
        let free = self.tree.tiers().free_device();
        if need > free {
            self.evict(need - free)?;
        }
        let mut leaf = Some(pinned.unwrap_or(ROOT));
        let host: Vec<NodeId> = m.path.iter().copied().filter(|&id| self.tree.node(id).tier == Tier::Host).collect();
        for id in host {
            if self.tree.node(id).token_len() > self.tree.tiers().free_device() {
                leaf = None;
                break;
            }
            self.tree.promote_to_device(id)?;
            self.events.push(Event::Promote { step: self.step, node: id, prefetch: false });
        }
        if leaf.is_some() && m.miss > 0 {
            leaf = if m.miss <= self.tree.tiers().free_device() {
                let r = self.tree.insert_suffix(&tokens, wf, agent)?;
                self.events.push(Event::Insert { step: self.step, wf, agent, seq: segments.to_vec() });
                Some(r.leaf)
            } else {
                None
            };
        }
        if let Some(p) = pinned {
            self.tree.unlock_path(p);
        }
        if leaf.is_none() {
            self.m.shortfalls += 1;
        }
        Ok((hits, leaf.filter(|&l| l != ROOT)))
    }

    fn demote(&mut self, id: NodeId) -> Result<(), SimError> {
        let len = self.tree.node(id).token_len();
        self.make_host_room(len, &[])?;
        let dropped = self.tree.demote_to_host(id)?.is_none();
        self.events.push(Event::Demote { step: self.step, node: id, dropped });
        if dropped {
            self.m.drops += 1;
        } else {
            self.m.demotions += 1;
        }
        Ok(())
    }

    fn drop_node(&mut self, id: NodeId) -> Result<(), SimError> {
        self.tree.drop_node(id)?;
        self.events.push(Event::Drop { step: self.step, node: id });
        self.m.drops += 1;
        Ok(())
    }

    /// Drops least recently used host leaves until `needed` host tokens are
    /// free or nothing else can go.
    fn make_host_room(&mut self, needed: usize, keep: &[NodeId]) -> Result<(), SimError> {
        if needed > self.tree.tiers().host_capacity {
            return Ok(());
        }
        while self.tree.tiers().free_host() < needed {
            let victim = self
                .tree
                .nodes()
                .filter(|n| n.tier == Tier::Host && n.children.is_empty() && !n.is_locked() && !keep.contains(&n.id))
                .min_by_key(|n| (n.last_access, n.id))
                .map(|n| n.id);
            let Some(victim) = victim else { break };
            self.drop_node(victim)?;
        }
        Ok(())
    }

    fn schedules(&self) -> BTreeMap<WorkflowId, Vec<AgentId>> {
        self.active
            .iter()
            .map(|(&wf, f)| {
                let from = f.running.as_ref().map_or(f.next, |r| r.index + 1);
                (wf, f.trace[from..].to_vec())
            })
            .collect()
    }

    fn evict(&mut self, needed: usize) -> Result<(), SimError> {
        if self.use_scores {
            self.heap.sync(&mut self.tree);
        }
        let schedules = (self.cfg.policy == EvictionPolicy::Kvflow).then(|| self.schedules());
        let list = select_victims(self.cfg.policy, &self.tree, needed, &self.heap, schedules.as_ref())?;
        let mut active_victims = 0;
        for &v in &list.victims {
            self.m.evicted_tokens += self.tree.node(v).token_len() as u64;
            if self.tree.node(v).retired && self.cfg.policy.is_lifecycle_aware() {
                self.drop_node(v)?;
            } else {
                if !self.tree.node(v).retired {
                    active_victims += 1;
                }
                self.demote(v)?;
            }
        }
        self.m.evictions += list.victims.len() as u64;
        self.m.first_eviction_step.get_or_insert(self.step);
        self.events.push(Event::Evict {
            step: self.step,
            needed,
            freed: list.freed,
            victims: list.victims.len(),
            shortfall: list.shortfall,
        });
        if self.m.retired_drained_step.is_none()
            && self.m.first_termination_step.is_some()
            && active_victims > 0
            && self.tree.retired_device_tokens() == 0
        {
            self.m.retired_drained_step = Some(self.step);
            self.events.push(Event::RetiredDrained { step: self.step });
        }
        Ok(())
    }

    fn prefetch(&mut self) -> Result<(), SimError> {
        if self.use_scores {
            self.heap.sync(&mut self.tree);
        }
        let plan = match self.cfg.prefetch {
            PrefetchMode::Off => return Ok(()),
            PrefetchMode::Conservative => plan_conservative_prefetch(&self.tree, &self.forecasts, self.cfg.bandwidth, 1)?,
            PrefetchMode::Aggressive { rho } => {
                plan_aggressive_prefetch(&self.tree, &self.forecasts, self.cfg.bandwidth, 1, rho, &self.heap)?
            }
        };
        if plan.selected.is_empty() {
            return Ok(());
        }
        let mass_before = self.cfg.audit.then(|| self.active_score_mass());
        for &d in &plan.displaced {
            if self.tree.node(d).retired {
                self.drop_node(d)?;
            } else {
                let len = self.tree.node(d).token_len();
                self.make_host_room(len, &plan.selected)?;
                let dropped = self.tree.demote_to_host(d)?.is_none();
                self.events.push(Event::Demote { step: self.step, node: d, dropped });
                self.m.demotions += u64::from(!dropped);
                self.m.drops += u64::from(dropped);
            }
        }
        for &s in &plan.selected {
            self.tree.promote_to_device(s)?;
            self.events.push(Event::Promote { step: self.step, node: s, prefetch: true });
        }
        self.m.prefetches += plan.selected.len() as u64;
        self.m.prefetched_tokens += plan.selected_tokens as u64;
        self.m.max_prefetch_tokens_per_step = self.m.max_prefetch_tokens_per_step.max(plan.selected_tokens);
        self.events.push(Event::Prefetch {
            step: self.step,
            selected: plan.selected.len(),
            tokens: plan.selected_tokens,
            displaced: plan.displaced.len(),
        });
        if let Some(before) = mass_before {
            if self.cfg.prefetch == PrefetchMode::Conservative && self.active_score_mass() < before - 1e-9 {
                return Err(SimError::Audit { step: self.step, reason: "prefetch lowered device score mass".into() });
            }
        }
        self.audit()
    }

    fn active_score_mass(&self) -> f64 {
        self.tree.nodes().filter(|n| n.tier == Tier::Device && !n.retired).map(|n| n.score).sum()
    }

    fn finish(mut self) -> SimOutput {
        let m = &mut self.m;
        m.steps = self.step;
        m.token_hit_rate = if m.prompt_tokens == 0 { 0.0 } else { m.device_hit_tokens as f64 / m.prompt_tokens as f64 };
        m.avg_workflow_latency = if m.workflows == 0 { 0.0 } else { self.latency_sum / m.workflows as f64 };
        m.avg_ttft = if m.invocations == 0 { 0.0 } else { self.ttft_sum / m.invocations as f64 };
        m.per_agent_ttft = self
            .ttft_by_agent
            .iter()
            .map(|(&a, &(sum, n))| (self.graph.agent_name(AgentId(a)).to_string(), sum / n as f64))
            .collect();
        SimOutput { metrics: self.m, events: self.events, tree: self.tree }
    }
}

/// Applies the tree operations of a log to a fresh cache.
pub fn replay(device_capacity: usize, host_capacity: usize, events: &[Event]) -> Result<CacheTree, SimError> {
    let mut tree = CacheTree::new(device_capacity, host_capacity);
    for (index, e) in events.iter().enumerate() {
        let diverged = |reason: String| SimError::Replay { index, reason };
        match e {
            Event::Match { wf, agent, seq, .. } => {
                tree.match_prefix(&expand(seq), *wf, *agent);
            }
            Event::Insert { wf, agent, seq, .. } => {
                tree.insert_suffix(&expand(seq), *wf, *agent).map_err(|e| diverged(e.to_string()))?;
            }
            Event::Demote { node, dropped, .. } => {
                let r = tree.demote_to_host(*node).map_err(|e| diverged(e.to_string()))?;
                if r.is_none() != *dropped {
                    return Err(diverged(format!("node {node} dropped={} on replay", r.is_none())));
                }
            }
            Event::Drop { node, .. } => {
                tree.drop_node(*node).map_err(|e| diverged(e.to_string()))?;
            }
            Event::Promote { node, .. } => {
                tree.promote_to_device(*node).map_err(|e| diverged(e.to_string()))?;
            }
            Event::Terminate { wf, .. } => {
                tree.on_workflow_terminated(*wf);
            }
            _ => {}
        }
    }
    Ok(tree)
}

pub fn write_events<W: Write>(events: &[Event], mut out: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events<R: BufRead>(input: R) -> io::Result<Vec<Event>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
        .collect()
}

/// Windowed token hit rate with phase markers. Markers are window indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct HitRateSeries {
    pub window: usize,
    pub hit_rate: Vec<f64>,
    pub first_eviction: Option<usize>,
    pub first_termination: Option<usize>,
    pub retired_drained: Option<usize>,
    pub pool_exhausted: Option<usize>,
}

impl HitRateSeries {
    /// Mean over windows `from..to`, clamped to the series.
    pub fn mean(&self, from: usize, to: usize) -> Option<f64> {
        let to = to.min(self.hit_rate.len());
        (from < to).then(|| self.hit_rate[from..to].iter().sum::<f64>() / (to - from) as f64)
    }
}

/// Splits the invocations of a log into windows of `window` invocations.
pub fn hit_rate_timeseries(events: &[Event], window: usize) -> Result<HitRateSeries, SimError> {
    if window == 0 {
        return Err(SimError::Config("window must be positive".into()));
    }
    let mut series = HitRateSeries { window, ..Default::default() };
    let (mut hit, mut total, mut in_window, mut seen) = (0usize, 0usize, 0usize, 0usize);
    for e in events {
        let at = seen / window;
        match e {
            Event::Invoke { device_hit, host_hit, miss, .. } => {
                hit += device_hit;
                total += device_hit + host_hit + miss;
                in_window += 1;
                seen += 1;
                if in_window == window {
                    series.hit_rate.push(if total == 0 { 0.0 } else { hit as f64 / total as f64 });
                    (hit, total, in_window) = (0, 0, 0);
                }
            }
            Event::Evict { .. } => {
                series.first_eviction.get_or_insert(at);
            }
            Event::Terminate { .. } => {
                series.first_termination.get_or_insert(at);
            }
            Event::RetiredDrained { .. } => {
                series.retired_drained.get_or_insert(at);
            }
            Event::PoolExhausted { .. } => {
                series.pool_exhausted.get_or_insert(at);
            }
            _ => {}
        }
    }
    if in_window > 0 {
        series.hit_rate.push(if total == 0 { 0.0 } else { hit as f64 / total as f64 });
    }
    if series.hit_rate.is_empty() {
        return Err(SimError::EmptyLog);
    }
    Ok(series)
}

pub fn write_timeseries_csv<W: Write>(series: &HitRateSeries, mut out: W) -> io::Result<()> {
    writeln!(out, "window,hit_rate")?;
    for (i, h) in series.hit_rate.iter().enumerate() {
        writeln!(out, "{i},{h:.6}")?;
    }
    Ok(())
}
