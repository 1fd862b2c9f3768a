//! Empirical checks of the score's analytical guarantees.
//!
//! Four properties are checked against independent computations:
//!
//! * the score equals the expected discounted miss count of dropping the node,
//!   estimated by sampling trajectories from the true kernel;
//! * the score moves by at most `L * eps` when forecasts are perturbed, where
//!   `L = (1 - gamma^K) / (2 (1 - gamma))` and `eps` is the discounted L1 error;
//! * a pair of nodes whose score gap exceeds their combined error margin keeps
//!   its order under the perturbed forecasts;
//! * evicting the bottom-`B` nodes by predicted score costs at most
//!   `L * sum(eps)` over the nodes where the predicted and true selections differ.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::callgraph::{AgentId, AgentMask, CallGraph, GraphError, GraphSpec, KernelRowSpec, WorkflowId};
use crate::predictor::{forecast_l1_error, oracle_predict, Forecast, PredictError};
use crate::scoring::{multi_step_score, ScoreError, ScoreParams};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("at least one trajectory is required")]
    NoTrajectories,
    #[error("{0} must be at least 1")]
    EmptySweep(&'static str),
    #[error("budget {budget} outside [1, {max}]")]
    Budget { budget: usize, max: usize },
    #[error("forecast shapes differ for workflow {0}")]
    ShapeMismatch(WorkflowId),
    #[error("no forecast for workflow {0}")]
    MissingForecast(WorkflowId),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Deliberate checker bugs, used to show that the sweeps catch them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Measures per-step deviation as total variation (half the L1
    /// distance) while keeping the bound's factor of one half.
    HalvedDeviation,
}

/// One workflow's stake in a node: where it is now and which of its agents
/// would read the node.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedWorkflow {
    pub prefix: Vec<AgentId>,
    pub mask: AgentMask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmcEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trajectories: usize,
}

/// Expected discounted number of misses over the horizon if the node stays
/// out of the cache, estimated from `trajectories` sampled continuations
/// per workflow.
pub fn emc_monte_carlo(
    g: &CallGraph,
    node: &[TrackedWorkflow],
    params: ScoreParams,
    trajectories: usize,
    seed: u64,
) -> Result<EmcEstimate, TheoryError> {
    if trajectories == 0 {
        return Err(TheoryError::NoTrajectories);
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut variance = 0.0;
    for w in node {
        g.validate_prefix(&w.prefix)?;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..trajectories {
            let path = g.sample_continuation(&w.prefix, params.horizon, &mut rng);
            let mut weight = 1.0;
            let mut misses = 0.0;
            for step in path {
                match step {
                    Some(a) if w.mask.contains(a) => misses += weight,
                    Some(_) => {}
                    None => break,
                }
                weight *= params.gamma;
            }
            sum += misses;
            sum_sq += misses * misses;
        }
        let n = trajectories as f64;
        let m = sum / n;
        mean += m;
        if trajectories > 1 {
            variance += (sum_sq - n * m * m).max(0.0) / (n - 1.0) / n;
        }
    }
    Ok(EmcEstimate { mean, stderr: variance.sqrt(), trajectories })
}

/// The node's score under exact forecasts, with workflow `i` of `node` as id `i`.
pub fn exact_score(g: &CallGraph, node: &[TrackedWorkflow], params: ScoreParams) -> Result<f64, TheoryError> {
    let mut forecasts = BTreeMap::new();
    let mut access = Vec::new();
    for (i, w) in node.iter().enumerate() {
        forecasts.insert(i as WorkflowId, oracle_predict(g, &w.prefix, params.horizon)?);
        access.push((i as WorkflowId, w.mask));
    }
    Ok(multi_step_score(&access, &forecasts, params)?)
}

/// Score sensitivity of one node to a forecast perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationReport {
    /// Per-step L1 deviation for each workflow that touches the node.
    pub eps_per_workflow: BTreeMap<WorkflowId, Vec<f64>>,
    /// Discounted deviation summed over those workflows.
    pub eps_gamma: f64,
    pub score: f64,
    pub score_hat: f64,
    pub delta: f64,
    pub bound_tight: f64,
    pub bound_loose: f64,
}

impl PerturbationReport {
    /// `delta / bound_tight`. Bounds below 1e-9 are rounding noise and give 0.
    pub fn ratio(&self) -> f64 {
        if self.bound_tight > 1e-9 {
            self.delta / self.bound_tight
        } else {
            0.0
        }
    }

    pub fn violated(&self) -> bool {
        let slack = 1e-12 * (1.0 + self.score.abs());
        self.delta > self.bound_tight + slack || self.bound_tight > self.bound_loose + slack
    }
}

fn discounted_eps(
    access: &[(WorkflowId, AgentMask)],
    truth: &BTreeMap<WorkflowId, Forecast>,
    predicted: &BTreeMap<WorkflowId, Forecast>,
    params: ScoreParams,
    fault: Fault,
) -> Result<(BTreeMap<WorkflowId, Vec<f64>>, f64), TheoryError> {
    let mut per_workflow = BTreeMap::new();
    let mut total = 0.0;
    for &(wf, _) in access {
        let t = truth.get(&wf).ok_or(TheoryError::MissingForecast(wf))?;
        let p = predicted.get(&wf).ok_or(TheoryError::MissingForecast(wf))?;
        if t.horizon() < params.horizon || p.horizon() < params.horizon {
            return Err(TheoryError::ShapeMismatch(wf));
        }
        let dev = forecast_l1_error(&t.truncated(params.horizon), &p.truncated(params.horizon), params.gamma)
            .map_err(|_| TheoryError::ShapeMismatch(wf))?;
        let scale = if fault == Fault::HalvedDeviation { 0.5 } else { 1.0 };
        total += scale * dev.discounted;
        per_workflow.insert(wf, dev.per_step.iter().map(|e| scale * e).collect());
    }
    Ok((per_workflow, total))
}

pub fn check_lipschitz(
    access: &[(WorkflowId, AgentMask)],
    truth: &BTreeMap<WorkflowId, Forecast>,
    predicted: &BTreeMap<WorkflowId, Forecast>,
    params: ScoreParams,
    fault: Fault,
) -> Result<PerturbationReport, TheoryError> {
    params.validate()?;
    let (eps_per_workflow, eps_gamma) = discounted_eps(access, truth, predicted, params, fault)?;
    let score = multi_step_score(access, truth, params)?;
    let score_hat = multi_step_score(access, predicted, params)?;
    Ok(PerturbationReport {
        eps_per_workflow,
        eps_gamma,
        score,
        score_hat,
        delta: (score - score_hat).abs(),
        bound_tight: params.lipschitz_constant() * eps_gamma,
        bound_loose: params.loose_lipschitz_constant() * eps_gamma,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingCheck {
    /// True score gap, higher node minus lower node.
    pub gap: f64,
    /// `L * (eps_1 + eps_2)`.
    pub margin: f64,
    pub condition_holds: bool,
    pub order_preserved: bool,
}

impl RankingCheck {
    pub fn violated(&self) -> bool {
        self.condition_holds && !self.order_preserved
    }
}

/// Compares the true and predicted order of two nodes. The pair is ordered
/// by true score first, so callers need not sort it.
pub fn check_ranking_stability(
    c1: &[(WorkflowId, AgentMask)],
    c2: &[(WorkflowId, AgentMask)],
    truth: &BTreeMap<WorkflowId, Forecast>,
    predicted: &BTreeMap<WorkflowId, Forecast>,
    params: ScoreParams,
) -> Result<RankingCheck, TheoryError> {
    let a = check_lipschitz(c1, truth, predicted, params, Fault::None)?;
    let b = check_lipschitz(c2, truth, predicted, params, Fault::None)?;
    let (hi, lo) = if a.score >= b.score { (&a, &b) } else { (&b, &a) };
    let gap = hi.score - lo.score;
    let margin = params.lipschitz_constant() * (hi.eps_gamma + lo.eps_gamma);
    Ok(RankingCheck {
        gap,
        margin,
        condition_holds: margin < gap,
        order_preserved: hi.score_hat > lo.score_hat,
    })
}

/// A node for the regret check: true and predicted score, its discounted
/// forecast error, and its size in units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegretNode {
    pub score: f64,
    pub predicted: f64,
    pub eps_gamma: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegretReport {
    pub budget: usize,
    /// Units evicted under predicted scores.
    pub e_hat: Vec<usize>,
    /// Units evicted under true scores.
    pub e_star: Vec<usize>,
    pub regret: f64,
    /// Discounted error summed over units in exactly one of the two sets.
    pub sym_eps: f64,
    pub bound: f64,
}

impl RegretReport {
    pub fn violated(&self) -> bool {
        let slack = 1e-12 * (1.0 + self.bound);
        self.regret < -slack || self.regret > self.bound + slack
    }
}

/// Expands nodes into unit-size virtual nodes that share their node's scores.
/// Returns the owning node of each unit.
pub fn expand_units(nodes: &[RegretNode]) -> Vec<usize> {
    nodes.iter().enumerate().flat_map(|(i, n)| std::iter::repeat_n(i, n.size)).collect()
}

/// Units sorted by `key`, ties by unit index.
fn bottom(units: &[usize], budget: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| key(units[a]).total_cmp(&key(units[b])).then(a.cmp(&b)));
    let mut chosen = order[..budget].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Regret of evicting by predicted score, for each budget in `budgets`.
pub fn check_regret(
    nodes: &[RegretNode],
    params: ScoreParams,
    budgets: impl IntoIterator<Item = usize>,
) -> Result<Vec<RegretReport>, TheoryError> {
    params.validate()?;
    let units = expand_units(nodes);
    let max = units.len().saturating_sub(1);
    let mut reports = Vec::new();
    for budget in budgets {
        if budget == 0 || budget > max {
            return Err(TheoryError::Budget { budget, max });
        }
        let e_hat = bottom(&units, budget, |i| nodes[i].predicted);
        let e_star = bottom(&units, budget, |i| nodes[i].score);
        let loss = |set: &[usize]| set.iter().map(|&u| nodes[units[u]].score).sum::<f64>();
        let regret = loss(&e_hat) - loss(&e_star);
        let sym_eps: f64 = e_hat
            .iter()
            .filter(|u| e_star.binary_search(u).is_err())
            .chain(e_star.iter().filter(|u| e_hat.binary_search(u).is_err()))
            .map(|&u| nodes[units[u]].eps_gamma)
            .sum();
        reports.push(RegretReport {
            budget,
            e_hat,
            e_star,
            regret,
            sym_eps,
            bound: params.lipschitz_constant() * sym_eps,
        });
    }
    Ok(reports)
}

/// Smallest total of `budget` values from `scores`, by enumerating every subset.
pub fn exhaustive_min_loss(scores: &[f64], budget: usize) -> f64 {
    fn go(scores: &[f64], start: usize, left: usize, acc: f64, best: &mut f64) {
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        for i in start..=scores.len() - left {
            go(scores, i + 1, left - 1, acc + scores[i], best);
        }
    }
    let mut best = f64::INFINITY;
    if budget <= scores.len() {
        go(scores, 0, budget, 0.0, &mut best);
    }
    best
}

/// Moves `predicted` toward `truth`: the result is `truth + t (predicted - truth)`.
pub fn scale_perturbation(truth: &Forecast, predicted: &Forecast, t: f64) -> Result<Forecast, TheoryError> {
    if truth.horizon() != predicted.horizon() || truth.num_outcomes() != predicted.num_outcomes() {
        return Err(TheoryError::ShapeMismatch(0));
    }
    let steps = truth
        .steps()
        .iter()
        .zip(predicted.steps())
        .map(|(p, q)| p.iter().zip(q).map(|(a, b)| a + t * (b - a)).collect())
        .collect();
    Ok(Forecast::new(truth.num_agents(), steps).map_err(PredictError::from)?)
}

// ---------------------------------------------------------------------------
// Random instances

/// A random first-order graph over `n` agents where every agent can end.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize) -> CallGraph {
    let names: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
    let mut edges = Vec::new();
    let mut kernel = Vec::new();
    for from in &names {
        let mut next = BTreeMap::new();
        for to in &names {
            if rng.gen_bool(0.6) {
                next.insert(to.clone(), -rng.gen::<f64>().ln());
                edges.push((from.clone(), to.clone()));
            }
        }
        next.insert("END".to_string(), 0.05 + 0.4 * rng.gen::<f64>());
        let total: f64 = next.values().sum();
        next.values_mut().for_each(|p| *p /= total);
        kernel.push(KernelRowSpec { context: vec![from.clone()], next });
    }
    let entry = [(names[rng.gen_range(0..n)].clone(), 1.0)].into_iter().collect();
    let spec = GraphSpec { agents: names, edges, kernel, entry, max_steps: 64 };
    CallGraph::from_spec(&spec).expect("random graphs are valid")
}

fn random_mask<R: Rng>(rng: &mut R, n: usize) -> AgentMask {
    AgentMask::from_agents((0..n).filter(|_| rng.gen_bool(0.4)).map(AgentId))
}

fn random_distribution<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let sparse = rng.gen_bool(0.3);
    let mut d: Vec<f64> =
        (0..len).map(|_| if sparse && rng.gen_bool(0.5) { 0.0 } else { -rng.gen::<f64>().ln() }).collect();
    if d.iter().all(|&x| x == 0.0) {
        d[rng.gen_range(0..len)] = 1.0;
    }
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|x| *x /= total);
    d
}

pub fn random_forecast<R: Rng>(rng: &mut R, num_agents: usize, horizon: usize) -> Forecast {
    let steps = (0..horizon).map(|_| random_distribution(rng, num_agents + 1)).collect();
    Forecast::new(num_agents, steps).expect("random distributions are valid")
}

/// A perturbed copy of `f`: a partial mix toward another random forecast,
/// toward uniform, or a transfer of mass between single outcomes.
pub fn random_perturbation<R: Rng>(rng: &mut R, f: &Forecast, max_strength: f64) -> Forecast {
    let n = f.num_outcomes();
    let t = max_strength * rng.gen::<f64>().powi(2);
    let steps = f
        .steps()
        .iter()
        .map(|p| match rng.gen_range(0..3) {
            0 => {
                let q = random_distribution(rng, n);
                p.iter().zip(&q).map(|(a, b)| a + t * (b - a)).collect()
            }
            1 => p.iter().map(|a| a + t * (1.0 / n as f64 - a)).collect(),
            _ => {
                let (from, to) = (rng.gen_range(0..n), rng.gen_range(0..n));
                let mut q = p.clone();
                let moved = t * q[from];
                q[from] -= moved;
                q[to] += moved;
                q
            }
        })
        .collect();
    Forecast::new(f.num_agents(), steps).expect("perturbations stay on the simplex")
}

/// Random forecasts for `workflows` workflows and a perturbed copy of each.
pub fn random_forecast_pair<R: Rng>(
    rng: &mut R,
    num_agents: usize,
    workflows: usize,
    horizon: usize,
    max_strength: f64,
) -> (BTreeMap<WorkflowId, Forecast>, BTreeMap<WorkflowId, Forecast>) {
    let mut truth = BTreeMap::new();
    let mut predicted = BTreeMap::new();
    for wf in 0..workflows as WorkflowId {
        let f = random_forecast(rng, num_agents, horizon);
        predicted.insert(wf, random_perturbation(rng, &f, max_strength));
        truth.insert(wf, f);
    }
    (truth, predicted)
}

/// Random access list over `workflows` workflows; each is included with
/// probability one half.
pub fn random_access<R: Rng>(rng: &mut R, num_agents: usize, workflows: usize) -> Vec<(WorkflowId, AgentMask)> {
    let mut access = Vec::new();
    for wf in 0..workflows as WorkflowId {
        if rng.gen_bool(0.5) {
            access.push((wf, random_mask(rng, num_agents)));
        }
    }
    access
}

fn random_params<R: Rng>(rng: &mut R) -> ScoreParams {
    ScoreParams { horizon: rng.gen_range(1..=5), gamma: rng.gen_range(0.1..0.95) }
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoryConfig {
    pub seed: u64,
    pub emc_instances: usize,
    pub emc_trajectories: usize,
    pub lipschitz_instances: usize,
    pub ranking_pairs: usize,
    pub regret_instances: usize,
    /// Largest agent count for random graphs and forecasts.
    pub max_agents: usize,
    pub fault: Fault,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            seed: 0,
            emc_instances: 50,
            emc_trajectories: 100_000,
            lipschitz_instances: 10_000,
            ranking_pairs: 10_000,
            regret_instances: 1_000,
            max_agents: 6,
            fault: Fault::None,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let sizes = [
            ("emc_instances", self.emc_instances),
            ("emc_trajectories", self.emc_trajectories),
            ("lipschitz_instances", self.lipschitz_instances),
            ("ranking_pairs", self.ranking_pairs),
            ("regret_instances", self.regret_instances),
            ("max_agents", self.max_agents),
        ];
        match sizes.iter().find(|(_, n)| *n == 0) {
            Some((name, _)) => Err(TheoryError::EmptySweep(name)),
            None => Ok(()),
        }
    }
}

fn instance_rng(seed: u64, sweep: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sweep << 32 | i as u64);
    rng
}

/// One line of `theory-report.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryRow {
    pub instance_id: String,
    pub delta: f64,
    pub eps: f64,
    pub bound: f64,
    pub ratio: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmcCheck {
    pub instance: usize,
    pub estimate: EmcEstimate,
    pub score: f64,
}

impl EmcCheck {
    /// Distance between estimate and score in standard errors.
    pub fn z(&self) -> f64 {
        let diff = (self.estimate.mean - self.score).abs();
        if self.estimate.stderr > 0.0 {
            diff / self.estimate.stderr
        } else if diff < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

pub fn run_emc_sweep(cfg: &TheoryConfig) -> Result<Vec<EmcCheck>, TheoryError> {
    cfg.validate()?;
    (0..cfg.emc_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(cfg.seed, 1, i);
            let n = rng.gen_range(1..=cfg.max_agents);
            let g = random_graph(&mut rng, n);
            let params = ScoreParams { horizon: rng.gen_range(1..=5), gamma: rng.gen_range(0.1..0.95) };
            let node: Vec<TrackedWorkflow> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    let trace = g.sample_workflow_with(0, &mut rng);
                    let len = rng.gen_range(1..=trace.invocations.len());
                    TrackedWorkflow { prefix: trace.invocations[..len].to_vec(), mask: random_mask(&mut rng, n) }
                })
                .collect();
            let score = exact_score(&g, &node, params)?;
            let estimate = emc_monte_carlo(&g, &node, params, cfg.emc_trajectories, rng.gen())?;
            Ok(EmcCheck { instance: i, estimate, score })
        })
        .collect()
}

pub fn run_lipschitz_sweep(cfg: &TheoryConfig) -> Result<Vec<PerturbationReport>, TheoryError> {
    cfg.validate()?;
    (0..cfg.lipschitz_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(cfg.seed, 2, i);
            let n = rng.gen_range(1..=cfg.max_agents);
            let params = random_params(&mut rng);
            let workflows = rng.gen_range(1..=4);
            let (truth, predicted) = random_forecast_pair(&mut rng, n, workflows, params.horizon, 1.0);
            let access = random_access(&mut rng, n, workflows);
            check_lipschitz(&access, &truth, &predicted, params, cfg.fault)
        })
        .collect()
}

pub fn run_ranking_sweep(cfg: &TheoryConfig) -> Result<Vec<RankingCheck>, TheoryError> {
    cfg.validate()?;
    (0..cfg.ranking_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(cfg.seed, 3, i);
            let n = rng.gen_range(1..=cfg.max_agents);
            let params = random_params(&mut rng);
            let workflows = rng.gen_range(1..=4);
            // Small perturbations so that a good share of pairs meet the premise.
            let strength = 10f64.powf(rng.gen_range(-3.0..0.0));
            let (truth, predicted) = random_forecast_pair(&mut rng, n, workflows, params.horizon, strength);
            let c1 = random_access(&mut rng, n, workflows);
            let c2 = random_access(&mut rng, n, workflows);
            check_ranking_stability(&c1, &c2, &truth, &predicted, params)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegretInstance {
    pub instance: usize,
    pub nodes: Vec<RegretNode>,
    pub reports: Vec<RegretReport>,
    /// For instances of at most 12 units: whether the bottom-`B` true loss
    /// equals the enumerated minimum for every budget.
    pub enumeration_agrees: Option<bool>,
}

pub fn random_regret_nodes<R: Rng>(rng: &mut R, max_agents: usize, params: ScoreParams, perfect: bool) -> Vec<RegretNode> {
    let n = rng.gen_range(1..=max_agents);
    let workflows = rng.gen_range(1..=4);
    let strength = if perfect { 0.0 } else { 10f64.powf(rng.gen_range(-2.0..0.0)) };
    let (truth, predicted) = random_forecast_pair(rng, n, workflows, params.horizon, strength);
    let count = rng.gen_range(2..=20);
    let unit_sized = rng.gen_bool(0.5);
    (0..count)
        .map(|_| {
            let access = random_access(rng, n, workflows);
            let r = check_lipschitz(&access, &truth, &predicted, params, Fault::None).expect("shapes match");
            let size = if unit_sized { 1 } else { rng.gen_range(1..=3) };
            RegretNode { score: r.score, predicted: r.score_hat, eps_gamma: r.eps_gamma, size }
        })
        .collect()
}

pub fn run_regret_sweep(cfg: &TheoryConfig) -> Result<Vec<RegretInstance>, TheoryError> {
    cfg.validate()?;
    (0..cfg.regret_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(cfg.seed, 4, i);
            let params = random_params(&mut rng);
            let perfect = i % 10 == 0;
            let nodes = random_regret_nodes(&mut rng, cfg.max_agents, params, perfect);
            let units = expand_units(&nodes);
            let reports = check_regret(&nodes, params, 1..units.len())?;
            let enumeration_agrees = (units.len() <= 12).then(|| {
                let scores: Vec<f64> = units.iter().map(|&u| nodes[u].score).collect();
                reports.iter().all(|r| {
                    let star: f64 = r.e_star.iter().map(|&u| scores[u]).sum();
                    (star - exhaustive_min_loss(&scores, r.budget)).abs() <= 1e-12 * (1.0 + star.abs())
                })
            });
            Ok(RegretInstance { instance: i, nodes, reports, enumeration_agrees })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheorySummary {
    pub rows: Vec<TheoryRow>,
    pub max_emc_z: f64,
    pub emc_outside_3_sigma: usize,
    pub max_lipschitz_ratio: f64,
    pub lipschitz_violations: usize,
    pub ranking_premise_met: usize,
    pub ranking_violations: usize,
    pub ranking_flips_without_premise: usize,
    pub regret_violations: usize,
    pub regret_enumeration_mismatches: usize,
    pub regret_nonzero_under_perfect_prediction: usize,
}

impl TheorySummary {
    /// Bound violations. The sampling check is reported separately since a
    /// 3-sigma miss is not a bound violation.
    pub fn violations(&self) -> usize {
        self.lipschitz_violations
            + self.ranking_violations
            + self.regret_violations
            + self.regret_enumeration_mismatches
            + self.regret_nonzero_under_perfect_prediction
    }
}

pub fn run_theory_suite(cfg: &TheoryConfig) -> Result<TheorySummary, TheoryError> {
    cfg.validate()?;
    let mut rows = Vec::new();

    let emc = run_emc_sweep(cfg)?;
    for c in &emc {
        rows.push(TheoryRow {
            instance_id: format!("emc-{}", c.instance),
            delta: (c.estimate.mean - c.score).abs(),
            eps: 0.0,
            bound: 3.0 * c.estimate.stderr,
            ratio: c.z() / 3.0,
            violated: c.z() > 3.0,
        });
    }

    let lipschitz = run_lipschitz_sweep(cfg)?;
    for (i, r) in lipschitz.iter().enumerate() {
        rows.push(TheoryRow {
            instance_id: format!("lipschitz-{i}"),
            delta: r.delta,
            eps: r.eps_gamma,
            bound: r.bound_tight,
            ratio: r.ratio(),
            violated: r.violated(),
        });
    }

    let ranking = run_ranking_sweep(cfg)?;
    for (i, r) in ranking.iter().enumerate() {
        rows.push(TheoryRow {
            instance_id: format!("ranking-{i}"),
            delta: r.gap,
            eps: r.margin,
            bound: r.margin,
            ratio: if r.gap > 0.0 { r.margin / r.gap } else { f64::INFINITY },
            violated: r.violated(),
        });
    }

    let regret = run_regret_sweep(cfg)?;
    let mut regret_nonzero_under_perfect_prediction = 0;
    for inst in &regret {
        let perfect = inst.nodes.iter().all(|n| n.eps_gamma == 0.0);
        for r in &inst.reports {
            if perfect && r.regret != 0.0 {
                regret_nonzero_under_perfect_prediction += 1;
            }
            rows.push(TheoryRow {
                instance_id: format!("regret-{}-b{}", inst.instance, r.budget),
                delta: r.regret,
                eps: r.sym_eps,
                bound: r.bound,
                ratio: if r.bound > 0.0 { r.regret / r.bound } else { 0.0 },
                violated: r.violated(),
            });
        }
    }

    Ok(TheorySummary {
        max_emc_z: emc.iter().map(EmcCheck::z).fold(0.0, f64::max),
        emc_outside_3_sigma: emc.iter().filter(|c| c.z() > 3.0).count(),
        max_lipschitz_ratio: lipschitz.iter().map(PerturbationReport::ratio).fold(0.0, f64::max),
        lipschitz_violations: lipschitz.iter().filter(|r| r.violated()).count(),
        ranking_premise_met: ranking.iter().filter(|r| r.condition_holds).count(),
        ranking_violations: ranking.iter().filter(|r| r.violated()).count(),
        ranking_flips_without_premise: ranking.iter().filter(|r| !r.condition_holds && !r.order_preserved).count(),
        regret_violations: regret.iter().flat_map(|i| &i.reports).filter(|r| r.violated()).count(),
        regret_enumeration_mismatches: regret.iter().filter(|i| i.enumeration_agrees == Some(false)).count(),
        regret_nonzero_under_perfect_prediction,
        rows,
    })
}

pub fn write_theory_csv<W: Write>(rows: &[TheoryRow], mut out: W) -> io::Result<()> {
    writeln!(out, "instance_id,delta,eps,bound,ratio,violated")?;
    for r in rows {
        writeln!(out, "{},{:.12e},{:.12e},{:.12e},{:.6},{}", r.instance_id, r.delta, r.eps, r.bound, r.ratio, r.violated)?;
    }
    Ok(())
}
