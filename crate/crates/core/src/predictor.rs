//! Multi-step workflow forecasters.
//!
//! Every predictor emits a [`Forecast`]: `K` distributions over the agents
//! plus `END`, step `k` conditioned on the workflow surviving to step `k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::{AgentId, CallGraph, GraphError, WorkflowTrace};

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForecastError {
    #[error("forecast has no steps")]
    Empty,
    #[error("step {step} has {got} outcomes, expected {expected}")]
    Shape { step: usize, got: usize, expected: usize },
    #[error("step {step} has invalid probability {value}")]
    InvalidProbability { step: usize, value: f64 },
    #[error("step {step} sums to {sum}, not 1")]
    NotNormalized { step: usize, sum: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error("noise level {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("markov order must be at least 1")]
    ZeroOrder,
    #[error("smoothing constant {0} must be finite and non-negative")]
    InvalidAlpha(f64),
    #[error("agent index {agent} out of range for {num_agents} agents")]
    AgentOutOfRange { agent: usize, num_agents: usize },
    #[error("prefix is empty")]
    EmptyPrefix,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("forecast shapes differ: {0}")]
    ShapeMismatch(String),
}

/// Per-step distributions over `num_agents + 1` outcomes; the last is `END`.
/// Step indices are zero-based: `step(0)` is the next invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    num_agents: usize,
    steps: Vec<Vec<f64>>,
}

impl Forecast {
    pub fn new(num_agents: usize, steps: Vec<Vec<f64>>) -> Result<Self, ForecastError> {
        if steps.is_empty() {
            return Err(ForecastError::Empty);
        }
        for (k, dist) in steps.iter().enumerate() {
            if dist.len() != num_agents + 1 {
                return Err(ForecastError::Shape { step: k, got: dist.len(), expected: num_agents + 1 });
            }
            if let Some(&bad) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(ForecastError::InvalidProbability { step: k, value: bad });
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(ForecastError::NotNormalized { step: k, sum });
            }
        }
        Ok(Forecast { num_agents, steps })
    }

    /// Every step uniform over all outcomes.
    pub fn uniform(num_agents: usize, horizon: usize) -> Self {
        let u = 1.0 / (num_agents + 1) as f64;
        Forecast { num_agents, steps: vec![vec![u; num_agents + 1]; horizon] }
    }

    /// Every step certain to be `END`.
    pub fn ended(num_agents: usize, horizon: usize) -> Self {
        let mut dist = vec![0.0; num_agents + 1];
        dist[num_agents] = 1.0;
        Forecast { num_agents, steps: vec![dist; horizon] }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn num_outcomes(&self) -> usize {
        self.num_agents + 1
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.steps[k]
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    pub fn p_end(&self, k: usize) -> f64 {
        self.steps[k][self.num_agents]
    }

    /// Probability the workflow is still running at step `k`: the product of
    /// `1 - p_end` over the earlier steps. `survival(0) == 1`.
    pub fn survival(&self, k: usize) -> f64 {
        (0..k).map(|j| 1.0 - self.p_end(j)).product()
    }

    pub fn survival_probs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.horizon());
        let mut s = 1.0;
        for k in 0..self.horizon() {
            out.push(s);
            s *= 1.0 - self.p_end(k);
        }
        out
    }

    /// First `horizon` steps of this forecast.
    pub fn truncated(&self, horizon: usize) -> Forecast {
        Forecast { num_agents: self.num_agents, steps: self.steps[..horizon.min(self.horizon())].to_vec() }
    }
}

/// Forward propagation of a one-step row function over context states.
///
/// `history` is the invocation prefix, `order` the context length the row
/// function expects. With `max_steps`, any step whose position exceeds the
/// cap is forced to `END`. Returns per-step distributions conditioned on
/// survival; steps with no surviving mass are degenerate at `END`.
pub(crate) fn propagate<F>(
    history: &[usize],
    horizon: usize,
    order: usize,
    num_agents: usize,
    max_steps: Option<usize>,
    mut row: F,
) -> Vec<Vec<f64>>
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    let end = num_agents;
    let trim = |ctx: &[usize]| ctx[ctx.len().saturating_sub(order)..].to_vec();
    let mut states: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    states.insert(trim(history), 1.0);
    let mut position = history.len();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let alive: f64 = states.values().sum();
        let mut joint = vec![0.0; num_agents + 1];
        let mut next: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        if alive <= 0.0 {
            joint[end] = 1.0;
            out.push(joint);
            continue;
        }
        let capped = max_steps.is_some_and(|cap| position >= cap);
        for (ctx, &mass) in &states {
            if capped {
                joint[end] += mass;
                continue;
            }
            let probs = row(ctx);
            for (o, &p) in probs.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                joint[o] += mass * p;
                if o != end {
                    let mut extended = ctx.clone();
                    extended.push(o);
                    *next.entry(trim(&extended)).or_insert(0.0) += mass * p;
                }
            }
        }
        for p in joint.iter_mut() {
            *p /= alive;
        }
        // Renormalize away accumulated rounding so the result validates.
        let total: f64 = joint.iter().sum();
        for p in joint.iter_mut() {
            *p /= total;
        }
        out.push(joint);
        states = next;
        position += 1;
    }
    out
}

/// A source of multi-step forecasts for a workflow prefix.
pub trait Predictor: Send + Sync {
    fn forecast(&self, prefix: &[AgentId], horizon: usize) -> Result<Forecast, PredictError>;
}

/// Exact marginals from the ground-truth kernel.
#[derive(Clone, Copy, Debug)]
pub struct OraclePredictor<'g> {
    pub graph: &'g CallGraph,
}

impl Predictor for OraclePredictor<'_> {
    fn forecast(&self, prefix: &[AgentId], horizon: usize) -> Result<Forecast, PredictError> {
        oracle_predict(self.graph, prefix, horizon)
    }
}

/// Wraps another predictor and mixes its output toward uniform.
#[derive(Clone, Debug)]
pub struct NoisyPredictor<P> {
    inner: P,
    lambda: f64,
}

impl<P: Predictor> NoisyPredictor<P> {
    pub fn new(inner: P, lambda: f64) -> Result<Self, PredictError> {
        check_lambda(lambda)?;
        Ok(NoisyPredictor { inner, lambda })
    }
}

impl<P: Predictor> Predictor for NoisyPredictor<P> {
    fn forecast(&self, prefix: &[AgentId], horizon: usize) -> Result<Forecast, PredictError> {
        noisy_predict(&self.inner.forecast(prefix, horizon)?, self.lambda)
    }
}

pub fn oracle_predict(g: &CallGraph, prefix: &[AgentId], horizon: usize) -> Result<Forecast, PredictError> {
    Ok(g.true_kstep_marginals(prefix, horizon)?)
}

fn check_lambda(lambda: f64) -> Result<(), PredictError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(PredictError::LambdaOutOfRange(lambda))
    }
}

/// Replaces every step `P` with `(1 - lambda) P + lambda U`, `U` uniform over
/// all outcomes including `END`.
pub fn noisy_predict(base: &Forecast, lambda: f64) -> Result<Forecast, PredictError> {
    check_lambda(lambda)?;
    let u = 1.0 / base.num_outcomes() as f64;
    let steps = base
        .steps
        .iter()
        .map(|dist| dist.iter().map(|&p| (1.0 - lambda) * p + lambda * u).collect())
        .collect();
    Ok(Forecast::new(base.num_agents, steps)?)
}

/// Per-step L1 deviation and its discounted sum.
#[derive(Clone, Debug, PartialEq)]
pub struct L1Deviation {
    pub per_step: Vec<f64>,
    pub discounted: f64,
}

pub fn forecast_l1_error(truth: &Forecast, est: &Forecast, gamma: f64) -> Result<L1Deviation, PredictError> {
    if truth.horizon() != est.horizon() || truth.num_outcomes() != est.num_outcomes() {
        return Err(PredictError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            truth.horizon(),
            truth.num_outcomes(),
            est.horizon(),
            est.num_outcomes()
        )));
    }
    let per_step: Vec<f64> = truth
        .steps
        .iter()
        .zip(&est.steps)
        .map(|(p, q)| p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
        .collect();
    let mut weight = 1.0;
    let mut discounted = 0.0;
    for e in &per_step {
        discounted += weight * e;
        weight *= gamma;
    }
    Ok(L1Deviation { per_step, discounted })
}

/// Order-`n` Markov model over invocation histories with back-off.
///
/// Counts are kept for every context of length `0..=order`; the empty
/// context is the global unigram row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarkovDocument", into = "MarkovDocument")]
pub struct MarkovModel {
    order: usize,
    alpha: f64,
    num_agents: usize,
    counts: BTreeMap<Vec<usize>, Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MarkovDocument {
    order: usize,
    alpha: f64,
    num_agents: usize,
    rows: Vec<MarkovRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MarkovRow {
    context: Vec<usize>,
    counts: Vec<f64>,
}

impl From<MarkovModel> for MarkovDocument {
    fn from(m: MarkovModel) -> Self {
        MarkovDocument {
            order: m.order,
            alpha: m.alpha,
            num_agents: m.num_agents,
            rows: m.counts.into_iter().map(|(context, counts)| MarkovRow { context, counts }).collect(),
        }
    }
}

impl TryFrom<MarkovDocument> for MarkovModel {
    type Error = PredictError;

    fn try_from(doc: MarkovDocument) -> Result<Self, Self::Error> {
        let rows = doc.rows.into_iter().map(|r| (r.context, r.counts)).collect();
        MarkovModel::from_counts(doc.order, doc.alpha, doc.num_agents, rows)
    }
}

impl MarkovModel {
    /// Builds a model from explicit (possibly fractional) counts.
    pub fn from_counts(
        order: usize,
        alpha: f64,
        num_agents: usize,
        counts: BTreeMap<Vec<usize>, Vec<f64>>,
    ) -> Result<Self, PredictError> {
        if order == 0 {
            return Err(PredictError::ZeroOrder);
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(PredictError::InvalidAlpha(alpha));
        }
        for (ctx, row) in &counts {
            if ctx.len() > order {
                return Err(PredictError::ShapeMismatch(format!("context {ctx:?} longer than order {order}")));
            }
            if let Some(&a) = ctx.iter().find(|&&a| a >= num_agents) {
                return Err(PredictError::AgentOutOfRange { agent: a, num_agents });
            }
            if row.len() != num_agents + 1 {
                return Err(PredictError::ShapeMismatch(format!(
                    "row for {ctx:?} has {} outcomes, expected {}",
                    row.len(),
                    num_agents + 1
                )));
            }
            if row.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(PredictError::ShapeMismatch(format!("row for {ctx:?} has a negative count")));
            }
        }
        Ok(MarkovModel { order, alpha, num_agents, counts })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn counts(&self, context: &[usize]) -> Option<&[f64]> {
        self.counts.get(context).map(Vec::as_slice)
    }

    /// Smoothed next-outcome distribution for the longest seen suffix of
    /// `history`; uniform if nothing at all was seen.
    pub fn next_distribution(&self, history: &[usize]) -> Vec<f64> {
        let outcomes = self.num_agents + 1;
        let longest = self.order.min(history.len());
        for len in (0..=longest).rev() {
            let ctx = &history[history.len() - len..];
            if let Some(row) = self.counts.get(ctx) {
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    let denom = total + self.alpha * outcomes as f64;
                    return row.iter().map(|c| (c + self.alpha) / denom).collect();
                }
            }
        }
        vec![1.0 / outcomes as f64; outcomes]
    }
}

/// Counts every (context, next outcome) pair with context length up to `order`.
/// Terminated traces contribute a final `END` target.
pub fn train_markov(
    traces: &[WorkflowTrace],
    num_agents: usize,
    order: usize,
    alpha: f64,
) -> Result<MarkovModel, PredictError> {
    if traces.is_empty() {
        return Err(PredictError::EmptyCorpus);
    }
    let mut counts: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    for trace in traces {
        let mut seq: Vec<usize> = trace.invocations.iter().map(|a| a.0).collect();
        if let Some(&a) = seq.iter().find(|&&a| a >= num_agents) {
            return Err(PredictError::AgentOutOfRange { agent: a, num_agents });
        }
        if trace.terminated {
            seq.push(num_agents);
        }
        for i in 1..seq.len() {
            for len in 0..=order.min(i) {
                let row = counts
                    .entry(seq[i - len..i].to_vec())
                    .or_insert_with(|| vec![0.0; num_agents + 1]);
                row[seq[i]] += 1.0;
            }
        }
    }
    MarkovModel::from_counts(order, alpha, num_agents, counts)
}

pub fn markov_predict(m: &MarkovModel, prefix: &[AgentId], horizon: usize) -> Result<Forecast, PredictError> {
    if prefix.is_empty() {
        return Err(PredictError::EmptyPrefix);
    }
    if horizon == 0 {
        return Err(PredictError::ZeroHorizon);
    }
    let history: Vec<usize> = prefix.iter().map(|a| a.0).collect();
    if let Some(&a) = history.iter().find(|&&a| a >= m.num_agents) {
        return Err(PredictError::AgentOutOfRange { agent: a, num_agents: m.num_agents });
    }
    let steps = propagate(&history, horizon, m.order, m.num_agents, None, |ctx| m.next_distribution(ctx));
    Ok(Forecast::new(m.num_agents, steps)?)
}

impl Predictor for MarkovModel {
    fn forecast(&self, prefix: &[AgentId], horizon: usize) -> Result<Forecast, PredictError> {
        markov_predict(self, prefix, horizon)
    }
}

/// Fraction of positions where the arg-max at step `k` names the actual
/// outcome `k` invocations ahead. Positions whose target lies beyond a capped
/// trace are skipped.
pub fn top1_accuracy(
    predictor: &dyn Predictor,
    traces: &[WorkflowTrace],
    num_agents: usize,
    horizon: usize,
) -> Result<Vec<f64>, PredictError> {
    let mut hits = vec![0usize; horizon];
    let mut total = vec![0usize; horizon];
    for trace in traces {
        let mut seq: Vec<usize> = trace.invocations.iter().map(|a| a.0).collect();
        if trace.terminated {
            seq.push(num_agents);
        }
        for t in 1..=trace.invocations.len() {
            let f = predictor.forecast(&trace.invocations[..t], horizon)?;
            for k in 0..horizon {
                let Some(&target) = seq.get(t + k) else { break };
                let dist = f.step(k);
                let best = (0..dist.len())
                    .fold(0, |best, o| if dist[o] > dist[best] { o } else { best });
                total[k] += 1;
                if best == target {
                    hits[k] += 1;
                }
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&total)
        .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect())
}
