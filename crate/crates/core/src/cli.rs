//! Scenario files, batch runs over their cells, and CSV reports.
//!
//! A scenario names a graph file, a base simulator config, optional named
//! variants (sets of overrides), sweep axes and seeds. Cells are the cross
//! product of variants and axis values, enumerated variant-major with the
//! first axis slowest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::callgraph::GraphSpec;
use crate::policies::EvictionPolicy;
use crate::scoring::ScoreParams;
use crate::simulator::{
    hit_rate_timeseries, peak_working_set, run, write_events, Event, HitRateSeries, PredictorConfig, PrefetchMode,
    SimConfig, SimError, SimMetrics,
};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "LOOKAHEAD_KV_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("{0}")]
    UnknownName(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => 2,
            CliError::UnknownName(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Validation(_) => 5,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Validation(e.to_string())
    }
}

/// Device capacity as a fraction of the workload's peak working set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySpec {
    pub fraction_of_peak: f64,
    /// Host capacity as a multiple of device capacity.
    #[serde(default = "default_host_ratio")]
    pub host_ratio: f64,
}

fn default_host_ratio() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Config field, dotted for nested fields (`score.horizon`).
    pub param: String,
    pub values: Vec<Value>,
    /// Names used in cell labels instead of the values themselves.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

impl Axis {
    fn label(&self, i: usize) -> String {
        match &self.labels {
            Some(l) => l[i].clone(),
            None => match &self.values[i] {
                Value::String(s) => s.clone(),
                v => v.to_string(),
            },
        }
    }
}

/// Scenario file as written on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    /// Graph document, relative to the scenario file.
    pub graph: PathBuf,
    /// Every config field except `graph` and `seed`.
    pub base: Map<String, Value>,
    #[serde(default)]
    pub capacity: Option<CapacitySpec>,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub outputs: Option<PathBuf>,
    /// Also write each run's event log.
    #[serde(default)]
    pub write_events: bool,
}

/// A loaded scenario with the graph resolved.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub graph: GraphSpec,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub name: String,
    pub config: SimConfig,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Serde reports unknown enum names as "unknown variant"; everything else
/// is a malformed document.
fn classify(path: &Path, e: serde_json::Error) -> CliError {
    let reason = e.to_string();
    if reason.contains("unknown variant") {
        CliError::UnknownName(format!("{}: {reason}", path.display()))
    } else {
        CliError::Parse { path: path.display().to_string(), reason }
    }
}

fn set_path(root: &mut Map<String, Value>, dotted: &str, value: Value) {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut node = root;
    for p in parts {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if !entry.is_object() {
            *entry = Value::Object(Map::new());
        }
        node = entry.as_object_mut().expect("just made an object");
    }
    node.insert(last.to_string(), value);
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '_' })
        .collect()
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file: ScenarioFile = serde_json::from_str(&read(path)?).map_err(|e| classify(path, e))?;
        let graph_path = path.parent().unwrap_or(Path::new(".")).join(&file.graph);
        let graph: GraphSpec = serde_json::from_str(&read(&graph_path)?).map_err(|e| classify(&graph_path, e))?;
        let scenario = Scenario { file, graph };
        scenario.check()?;
        Ok(scenario)
    }

    fn check(&self) -> Result<(), CliError> {
        let f = &self.file;
        if f.seeds.is_empty() {
            return Err(CliError::Validation("scenario needs at least one seed".into()));
        }
        for axis in &f.axes {
            if axis.values.is_empty() {
                return Err(CliError::Validation(format!("axis {} has no values", axis.param)));
            }
            if axis.labels.as_ref().is_some_and(|l| l.len() != axis.values.len()) {
                return Err(CliError::Validation(format!("axis {} labels do not match values", axis.param)));
            }
        }
        if let Some(c) = f.capacity {
            if !(c.fraction_of_peak > 0.0 && c.host_ratio >= 0.0) {
                return Err(CliError::Validation("capacity fraction must be positive".into()));
            }
        }
        Ok(())
    }

    /// Every cell with its seedless config, in enumeration order. Capacity
    /// is not resolved yet.
    pub fn cells(&self) -> Result<Vec<Cell>, CliError> {
        let f = &self.file;
        let variants = if f.variants.is_empty() {
            vec![Variant { name: "base".into(), set: Map::new() }]
        } else {
            f.variants.clone()
        };
        let combos: usize = f.axes.iter().map(|a| a.values.len()).product();
        let mut cells = Vec::new();
        for v in &variants {
            for mut combo in 0..combos {
                let mut doc = f.base.clone();
                for (k, val) in &v.set {
                    set_path(&mut doc, k, val.clone());
                }
                let mut name = v.name.clone();
                let mut picks = vec![0; f.axes.len()];
                for (i, axis) in f.axes.iter().enumerate().rev() {
                    picks[i] = combo % axis.values.len();
                    combo /= axis.values.len();
                }
                for (axis, &i) in f.axes.iter().zip(&picks) {
                    set_path(&mut doc, &axis.param, axis.values[i].clone());
                    name.push_str(&format!("/{}={}", axis.param, axis.label(i)));
                }
                doc.insert("graph".into(), serde_json::to_value(&self.graph).expect("graph serializes"));
                doc.insert("seed".into(), Value::from(f.seeds[0]));
                doc.entry("device_capacity").or_insert(Value::from(0));
                doc.entry("host_capacity").or_insert(Value::from(0));
                let config: SimConfig = serde_json::from_value(Value::Object(doc)).map_err(|e| {
                    let reason = format!("cell {name}: {e}");
                    if reason.contains("unknown variant") {
                        CliError::UnknownName(reason)
                    } else {
                        CliError::Parse { path: f.name.clone(), reason }
                    }
                })?;
                cells.push(Cell { name, config });
            }
        }
        Ok(cells)
    }
}

/// The config with everything that does not shape the workload reset, so
/// cells that share a workload share a capacity.
fn workload_key(cfg: &SimConfig) -> String {
    let mut w = cfg.clone();
    w.policy = EvictionPolicy::Lru;
    w.prefetch = PrefetchMode::Off;
    w.predictor = PredictorConfig::Oracle;
    w.score = ScoreParams::default();
    w.device_capacity = 0;
    w.host_capacity = 0;
    w.audit = false;
    serde_json::to_string(&w).expect("config serializes")
}

/// Sets each cell's capacities from the scenario's capacity spec.
pub fn resolve_capacity(scenario: &Scenario, cells: &mut [Cell]) -> Result<(), CliError> {
    let Some(spec) = scenario.file.capacity else {
        return Ok(());
    };
    let mut peaks: BTreeMap<String, usize> = BTreeMap::new();
    for cell in cells.iter_mut() {
        let key = workload_key(&cell.config);
        let peak = match peaks.get(&key) {
            Some(&p) => p,
            None => {
                let p = peak_working_set(&cell.config)?;
                log::info!("{}: peak working set {p} tokens", cell.name);
                peaks.insert(key, p);
                p
            }
        };
        cell.config.device_capacity = (peak as f64 * spec.fraction_of_peak).round() as usize;
        cell.config.host_capacity = (cell.config.device_capacity as f64 * spec.host_ratio).round() as usize;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub cell: usize,
    pub seed: u64,
    pub device_capacity: usize,
    pub host_capacity: usize,
    pub metrics: SimMetrics,
    pub series: HitRateSeries,
    pub events: Option<Vec<Event>>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub cells: Vec<Cell>,
    pub runs: Vec<RunRecord>,
}

impl GridResult {
    pub fn runs_of(&self, cell: usize) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.cell == cell)
    }

    pub fn cell_index(&self, name: &str) -> Option<usize> {
        self.cells.iter().position(|c| c.name == name)
    }

    /// Mean token hit rate of a cell over its seeds.
    pub fn mean_hit_rate(&self, cell: usize) -> f64 {
        mean_std(&self.runs_of(cell).map(|r| r.metrics.token_hit_rate).collect::<Vec<_>>()).0
    }
}

/// Runs every (cell, seed) pair on a pool of `workers` threads.
pub fn run_grid(scenario: &Scenario, workers: usize, seed_offset: u64) -> Result<GridResult, CliError> {
    let mut cells = scenario.cells()?;
    resolve_capacity(scenario, &mut cells)?;
    for c in &cells {
        c.config.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| scenario.file.seeds.iter().map(move |&s| (c, s + seed_offset)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let keep_events = scenario.file.write_events;
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|&(cell, seed)| {
                let mut cfg = cells[cell].config.clone();
                cfg.seed = seed;
                let out = run(&cfg)?;
                log::info!("{} seed {seed}: hit rate {:.4}", cells[cell].name, out.metrics.token_hit_rate);
                Ok(RunRecord {
                    cell,
                    seed,
                    device_capacity: cfg.device_capacity,
                    host_capacity: cfg.host_capacity,
                    series: hit_rate_timeseries(&out.events, cfg.window)?,
                    metrics: out.metrics,
                    events: keep_events.then_some(out.events),
                })
            })
            .collect::<Result<Vec<_>, SimError>>()
    })?;
    Ok(GridResult { cells, runs })
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

type Aggregated = (&'static str, fn(&SimMetrics) -> f64);

const AGGREGATED: [Aggregated; 7] = [
    ("token_hit_rate", |m| m.token_hit_rate),
    ("avg_workflow_latency", |m| m.avg_workflow_latency),
    ("avg_ttft", |m| m.avg_ttft),
    ("evictions", |m| m.evictions as f64),
    ("prefetched_tokens", |m| m.prefetched_tokens as f64),
    ("shortfalls", |m| m.shortfalls as f64),
    ("steps", |m| m.steps as f64),
];

/// Writes `metrics.csv`, `aggregate.csv`, `markers.csv`, `agent_ttft.csv`,
/// one time series per cell and, if requested, event logs.
pub fn write_outputs(grid: &GridResult, dir: &Path) -> Result<(), CliError> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: io::Error| CliError::io(&p, e)
    };
    fs::create_dir_all(dir.join("timeseries")).map_err(io_err(dir))?;

    let path = dir.join("metrics.csv");
    let mut out = create(&path)?;
    (|| -> io::Result<()> {
        writeln!(
            out,
            "cell,seed,device_capacity,host_capacity,token_hit_rate,prompt_tokens,device_hit_tokens,host_hit_tokens,\
             miss_tokens,avg_workflow_latency,avg_ttft,invocations,workflows,steps,evictions,evicted_tokens,demotions,\
             drops,prefetches,prefetched_tokens,shortfalls,first_eviction_step,first_termination_step,retired_drained_step"
        )?;
        for r in &grid.runs {
            let m = &r.metrics;
            writeln!(
                out,
                "{},{},{},{},{:.6},{},{},{},{},{:.6},{:.6},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                grid.cells[r.cell].name,
                r.seed,
                r.device_capacity,
                r.host_capacity,
                m.token_hit_rate,
                m.prompt_tokens,
                m.device_hit_tokens,
                m.host_hit_tokens,
                m.miss_tokens,
                m.avg_workflow_latency,
                m.avg_ttft,
                m.invocations,
                m.workflows,
                m.steps,
                m.evictions,
                m.evicted_tokens,
                m.demotions,
                m.drops,
                m.prefetches,
                m.prefetched_tokens,
                m.shortfalls,
                opt(m.first_eviction_step),
                opt(m.first_termination_step),
                opt(m.retired_drained_step),
            )?;
        }
        out.flush()
    })()
    .map_err(io_err(&path))?;

    let path = dir.join("aggregate.csv");
    let mut out = create(&path)?;
    (|| -> io::Result<()> {
        write!(out, "cell,runs")?;
        for (name, _) in AGGREGATED {
            write!(out, ",{name}_mean,{name}_std")?;
        }
        writeln!(out)?;
        for (i, cell) in grid.cells.iter().enumerate() {
            let runs: Vec<&RunRecord> = grid.runs_of(i).collect();
            write!(out, "{},{}", cell.name, runs.len())?;
            for (_, get) in AGGREGATED {
                let (m, s) = mean_std(&runs.iter().map(|r| get(&r.metrics)).collect::<Vec<_>>());
                write!(out, ",{m:.6},{s:.6}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    })()
    .map_err(io_err(&path))?;

    let path = dir.join("markers.csv");
    let mut out = create(&path)?;
    (|| -> io::Result<()> {
        writeln!(out, "cell,seed,window,first_eviction,first_termination,retired_drained,pool_exhausted")?;
        for r in &grid.runs {
            let s = &r.series;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                grid.cells[r.cell].name,
                r.seed,
                s.window,
                opt(s.first_eviction),
                opt(s.first_termination),
                opt(s.retired_drained),
                opt(s.pool_exhausted)
            )?;
        }
        out.flush()
    })()
    .map_err(io_err(&path))?;

    let path = dir.join("agent_ttft.csv");
    let mut out = create(&path)?;
    (|| -> io::Result<()> {
        writeln!(out, "cell,seed,agent,avg_ttft")?;
        for r in &grid.runs {
            for (agent, t) in &r.metrics.per_agent_ttft {
                writeln!(out, "{},{},{agent},{t:.6}", grid.cells[r.cell].name, r.seed)?;
            }
        }
        out.flush()
    })()
    .map_err(io_err(&path))?;

    for (i, cell) in grid.cells.iter().enumerate() {
        let path = dir.join("timeseries").join(format!("{i:03}-{}.csv", file_safe(&cell.name)));
        let mut out = create(&path)?;
        (|| -> io::Result<()> {
            writeln!(out, "seed,window,hit_rate")?;
            for r in grid.runs_of(i) {
                for (w, h) in r.series.hit_rate.iter().enumerate() {
                    writeln!(out, "{},{w},{h:.6}", r.seed)?;
                }
            }
            out.flush()
        })()
        .map_err(io_err(&path))?;
    }

    if grid.runs.iter().any(|r| r.events.is_some()) {
        fs::create_dir_all(dir.join("events")).map_err(io_err(dir))?;
        for r in &grid.runs {
            if let Some(events) = &r.events {
                let path =
                    dir.join("events").join(format!("{:03}-{}-s{}.jsonl", r.cell, file_safe(&grid.cells[r.cell].name), r.seed));
                let mut out = create(&path)?;
                write_events(events, &mut out).and_then(|_| out.flush()).map_err(io_err(&path))?;
            }
        }
    }
    Ok(())
}

/// Output directory: the flag, then the environment, then the scenario's
/// own setting, then `results/<name>`.
pub fn output_dir(scenario: &Scenario, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV) {
        return PathBuf::from(p);
    }
    scenario.file.outputs.clone().unwrap_or_else(|| PathBuf::from("results").join(&scenario.file.name))
}

/// Loads a scenario, runs it and writes its reports.
pub fn run_scenario(path: &Path, out: Option<&Path>, workers: usize, seed_offset: u64) -> Result<GridResult, CliError> {
    let scenario = Scenario::load(path)?;
    let grid = run_grid(&scenario, workers, seed_offset)?;
    write_outputs(&grid, &output_dir(&scenario, out))?;
    Ok(grid)
}
