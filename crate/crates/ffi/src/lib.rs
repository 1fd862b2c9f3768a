//! C ABI over the simulator, the scorer and the bound checks.
//!
//! Every function returns an [`LkvStatus`]. On failure the message is kept
//! per thread and can be read with [`lkv_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lookahead_kv::callgraph::{AgentMask, WorkflowId};
use lookahead_kv::predictor::Forecast;
use lookahead_kv::scoring::{multi_step_score, ScoreParams};
use lookahead_kv::simulator::{self, SimConfig, SimError, SimMetrics};
use lookahead_kv::theory::{run_theory_suite, TheoryConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LkvStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// The JSON document did not parse or did not match the schema.
    Parse = 3,
    /// The input parsed but was rejected.
    Invalid = 4,
    /// A run or sweep failed part way.
    Failed = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// A validated simulation config.
pub struct LkvConfig {
    inner: SimConfig,
}

/// The result of one simulation run.
pub struct LkvRun {
    metrics: SimMetrics,
    metrics_json: CString,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LkvMetrics {
    pub token_hit_rate: f64,
    pub avg_workflow_latency: f64,
    pub avg_ttft: f64,
    pub prompt_tokens: u64,
    pub device_hit_tokens: u64,
    pub host_hit_tokens: u64,
    pub miss_tokens: u64,
    pub invocations: u64,
    pub workflows: u64,
    pub steps: u64,
    pub evictions: u64,
    pub prefetched_tokens: u64,
    pub shortfalls: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LkvTheoryOptions {
    pub seed: u64,
    pub emc_instances: usize,
    pub emc_trajectories: usize,
    pub lipschitz_instances: usize,
    pub ranking_pairs: usize,
    pub regret_instances: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LkvTheorySummary {
    pub max_emc_z: f64,
    pub emc_outside_3_sigma: usize,
    pub max_lipschitz_ratio: f64,
    pub lipschitz_violations: usize,
    pub ranking_premise_met: usize,
    pub ranking_violations: usize,
    pub regret_violations: usize,
    pub regret_enumeration_mismatches: usize,
    pub regret_nonzero_under_perfect_prediction: usize,
    /// Bound violations, not counting sampling misses.
    pub violations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LkvStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LkvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LkvStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            LkvStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(LkvStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn sim_failure(e: SimError) -> Failure {
    let status = match e {
        SimError::Audit { .. } | SimError::Replay { .. } => LkvStatus::Failed,
        _ => LkvStatus::Invalid,
    };
    Failure(status, e.to_string())
}

/// Message of the last failed call on this thread, or null if the last
/// call succeeded. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lkv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn lkv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a simulation config given as JSON.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lkv_config_from_json(json: *const c_char, out: *mut *mut LkvConfig) -> LkvStatus {
    guard(|| {
        non_null(json, "json")?;
        non_null(out, "out")?;
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Failure(LkvStatus::InvalidUtf8, e.to_string()))?;
        let inner: SimConfig = serde_json::from_str(text).map_err(|e| Failure(LkvStatus::Parse, e.to_string()))?;
        inner.validate().map_err(sim_failure)?;
        *out = Box::into_raw(Box::new(LkvConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `config` must come from [`lkv_config_from_json`] and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn lkv_config_set_seed(config: *mut LkvConfig, seed: u64) -> LkvStatus {
    guard(|| {
        non_null(config, "config")?;
        (*config).inner.seed = seed;
        Ok(())
    })
}

/// Sets device and host capacity in tokens.
///
/// # Safety
/// `config` must come from [`lkv_config_from_json`] and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn lkv_config_set_capacity(config: *mut LkvConfig, device: usize, host: usize) -> LkvStatus {
    guard(|| {
        non_null(config, "config")?;
        let mut next = (*config).inner.clone();
        next.device_capacity = device;
        next.host_capacity = host;
        next.validate().map_err(sim_failure)?;
        (*config).inner = next;
        Ok(())
    })
}

/// Peak working set of the config's workload, in tokens.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lkv_peak_working_set(config: *const LkvConfig, out: *mut usize) -> LkvStatus {
    guard(|| {
        non_null(config, "config")?;
        non_null(out, "out")?;
        *out = simulator::peak_working_set(&(*config).inner).map_err(sim_failure)?;
        Ok(())
    })
}

/// # Safety
/// `config` must come from [`lkv_config_from_json`]; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lkv_config_free(config: *mut LkvConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs one simulation.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lkv_run(config: *const LkvConfig, out: *mut *mut LkvRun) -> LkvStatus {
    guard(|| {
        non_null(config, "config")?;
        non_null(out, "out")?;
        let result = simulator::run(&(*config).inner).map_err(sim_failure)?;
        let json = serde_json::to_string(&result.metrics).map_err(|e| Failure(LkvStatus::Failed, e.to_string()))?;
        let metrics_json = CString::new(json).map_err(|e| Failure(LkvStatus::Failed, e.to_string()))?;
        *out = Box::into_raw(Box::new(LkvRun { metrics: result.metrics, metrics_json }));
        Ok(())
    })
}

/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lkv_run_metrics(run: *const LkvRun, out: *mut LkvMetrics) -> LkvStatus {
    guard(|| {
        non_null(run, "run")?;
        non_null(out, "out")?;
        let m = &(*run).metrics;
        *out = LkvMetrics {
            token_hit_rate: m.token_hit_rate,
            avg_workflow_latency: m.avg_workflow_latency,
            avg_ttft: m.avg_ttft,
            prompt_tokens: m.prompt_tokens,
            device_hit_tokens: m.device_hit_tokens,
            host_hit_tokens: m.host_hit_tokens,
            miss_tokens: m.miss_tokens,
            invocations: m.invocations,
            workflows: m.workflows,
            steps: m.steps,
            evictions: m.evictions,
            prefetched_tokens: m.prefetched_tokens,
            shortfalls: m.shortfalls,
        };
        Ok(())
    })
}

/// Full metrics as JSON, owned by the run handle.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer. The string is
/// freed with the handle.
#[no_mangle]
pub unsafe extern "C" fn lkv_run_metrics_json(run: *const LkvRun, out: *mut *const c_char) -> LkvStatus {
    guard(|| {
        non_null(run, "run")?;
        non_null(out, "out")?;
        *out = (*run).metrics_json.as_ptr();
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`lkv_run`]; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lkv_run_free(run: *mut LkvRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Lookahead score of one cache node.
///
/// `forecasts` holds `workflows * horizon * (num_agents + 1)` probabilities:
/// per workflow, per step, one entry per agent then END. `masks[w]` has bit
/// `a` set if agent `a` of workflow `w` reads the node.
///
/// # Safety
/// The arrays must hold the lengths described above.
#[no_mangle]
pub unsafe extern "C" fn lkv_score(
    num_agents: usize,
    horizon: usize,
    gamma: f64,
    workflows: usize,
    forecasts: *const f64,
    masks: *const u64,
    out: *mut f64,
) -> LkvStatus {
    guard(|| {
        non_null(out, "out")?;
        if workflows > 0 {
            non_null(forecasts, "forecasts")?;
            non_null(masks, "masks")?;
        }
        let params = ScoreParams::new(horizon, gamma).map_err(|e| Failure(LkvStatus::Invalid, e.to_string()))?;
        let width = num_agents + 1;
        let probs = if workflows == 0 { &[][..] } else { std::slice::from_raw_parts(forecasts, workflows * horizon * width) };
        let masks = if workflows == 0 { &[][..] } else { std::slice::from_raw_parts(masks, workflows) };
        let mut table = BTreeMap::new();
        let mut access = Vec::new();
        for w in 0..workflows {
            let block = &probs[w * horizon * width..(w + 1) * horizon * width];
            let steps = block.chunks(width).map(<[f64]>::to_vec).collect();
            let f = Forecast::new(num_agents, steps).map_err(|e| Failure(LkvStatus::Invalid, e.to_string()))?;
            table.insert(w as WorkflowId, f);
            access.push((w as WorkflowId, AgentMask(masks[w])));
        }
        *out = multi_step_score(&access, &table, params).map_err(|e| Failure(LkvStatus::Invalid, e.to_string()))?;
        Ok(())
    })
}

/// Default sweep sizes.
#[no_mangle]
pub extern "C" fn lkv_theory_default_options() -> LkvTheoryOptions {
    let d = TheoryConfig::default();
    LkvTheoryOptions {
        seed: d.seed,
        emc_instances: d.emc_instances,
        emc_trajectories: d.emc_trajectories,
        lipschitz_instances: d.lipschitz_instances,
        ranking_pairs: d.ranking_pairs,
        regret_instances: d.regret_instances,
    }
}

/// Runs the bound checks. A clean run still returns `Ok` when bounds are
/// violated; check `violations` in the summary.
///
/// # Safety
/// `options` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lkv_theory_run(options: *const LkvTheoryOptions, out: *mut LkvTheorySummary) -> LkvStatus {
    guard(|| {
        non_null(options, "options")?;
        non_null(out, "out")?;
        let o = *options;
        let cfg = TheoryConfig {
            seed: o.seed,
            emc_instances: o.emc_instances,
            emc_trajectories: o.emc_trajectories,
            lipschitz_instances: o.lipschitz_instances,
            ranking_pairs: o.ranking_pairs,
            regret_instances: o.regret_instances,
            ..TheoryConfig::default()
        };
        let s = run_theory_suite(&cfg).map_err(|e| Failure(LkvStatus::Invalid, e.to_string()))?;
        *out = LkvTheorySummary {
            max_emc_z: s.max_emc_z,
            emc_outside_3_sigma: s.emc_outside_3_sigma,
            max_lipschitz_ratio: s.max_lipschitz_ratio,
            lipschitz_violations: s.lipschitz_violations,
            ranking_premise_met: s.ranking_premise_met,
            ranking_violations: s.ranking_violations,
            regret_violations: s.regret_violations,
            regret_enumeration_mismatches: s.regret_enumeration_mismatches,
            regret_nonzero_under_perfect_prediction: s.regret_nonzero_under_perfect_prediction,
            violations: s.violations(),
        };
        Ok(())
    })
}
