#![allow(dead_code)]

use lookahead_kv::callgraph::*;

pub fn row(ctx: &[&str], next: &[(&str, f64)]) -> KernelRowSpec {
    KernelRowSpec {
        context: ctx.iter().map(|s| s.to_string()).collect(),
        next: next.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

pub fn spec(
    agents: &[&str],
    edges: &[(&str, &str)],
    kernel: Vec<KernelRowSpec>,
    entry: &[(&str, f64)],
) -> GraphSpec {
    GraphSpec {
        agents: agents.iter().map(|s| s.to_string()).collect(),
        edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        kernel,
        entry: entry.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        max_steps: DEFAULT_MAX_STEPS,
    }
}

/// A -> B -> END, deterministic.
pub fn chain() -> CallGraph {
    CallGraph::from_spec(&spec(
        &["A", "B"],
        &[("A", "B")],
        vec![row(&["A"], &[("B", 1.0)]), row(&["B"], &[("END", 1.0)])],
        &[("A", 1.0)],
    ))
    .unwrap()
}

/// Planner -> Analyzer -> Coder -> Tester, with Tester retrying through Analyzer.
pub fn retry(retry_prob: f64) -> CallGraph {
    CallGraph::from_spec(&spec(
        &["Planner", "Analyzer", "Coder", "Tester"],
        &[
            ("Planner", "Analyzer"),
            ("Analyzer", "Coder"),
            ("Coder", "Tester"),
            ("Tester", "Analyzer"),
        ],
        vec![
            row(&["Planner"], &[("Analyzer", 1.0)]),
            row(&["Analyzer"], &[("Coder", 1.0)]),
            row(&["Coder"], &[("Tester", 1.0)]),
            row(&["Tester"], &[("Analyzer", retry_prob), ("END", 1.0 - retry_prob)]),
        ],
        &[("Planner", 1.0)],
    ))
    .unwrap()
}

/// Three agents in a loop with exits from each.
pub fn three_loop() -> CallGraph {
    CallGraph::from_spec(&spec(
        &["A", "B", "C"],
        &[("A", "B"), ("A", "C"), ("B", "C"), ("B", "A"), ("C", "A")],
        vec![
            row(&["A"], &[("B", 0.5), ("C", 0.3), ("END", 0.2)]),
            row(&["B"], &[("C", 0.6), ("A", 0.1), ("END", 0.3)]),
            row(&["C"], &[("A", 0.7), ("END", 0.3)]),
        ],
        &[("A", 1.0)],
    ))
    .unwrap()
}
