use std::collections::{BTreeMap, BTreeSet};

use lookahead_kv::cache::{CacheTree, NodeId};
use lookahead_kv::callgraph::{AgentId, WorkflowId};
use lookahead_kv::policies::*;
use lookahead_kv::predictor::Forecast;
use lookahead_kv::scoring::{refresh_scores, ScoreHeap, ScoreParams};

const A: AgentId = AgentId(0);
const B: AgentId = AgentId(1);

fn seq(start: u32, len: usize) -> Vec<u32> {
    (start..start + len as u32).collect()
}

/// Leaves `[100..]`, `[200..]`, `[300..]` of 10 tokens each, touched in the given order.
fn three_leaves(order: [u32; 3]) -> (CacheTree, BTreeMap<u32, NodeId>) {
    let mut t = CacheTree::new(1000, 1000);
    let mut ids = BTreeMap::new();
    for (wf, start) in [100u32, 200, 300].into_iter().enumerate() {
        ids.insert(start, t.insert_suffix(&seq(start, 10), wf as u64, A).unwrap().leaf);
    }
    for start in order {
        t.match_prefix(&seq(start, 10), 9, A);
    }
    (t, ids)
}

#[test]
fn lru_picks_oldest_leaf() {
    let (t, ids) = three_leaves([300, 100, 200]);
    let v = select_victims_lru(&t, 1);
    assert_eq!(v.victims, vec![ids[&300]]);
    assert!(!v.shortfall);
}

#[test]
fn lru_reports_shortfall() {
    let (t, _) = three_leaves([100, 200, 300]);
    let v = select_victims_lru(&t, 1000);
    assert_eq!(v.victims.len(), 3);
    assert_eq!(v.freed, 30);
    assert!(v.shortfall);
}

#[test]
fn eviction_exposes_parent() {
    let mut t = CacheTree::new(1000, 1000);
    t.insert_suffix(&seq(0, 10), 1, A).unwrap();
    let child = t.insert_suffix(&seq(0, 20), 1, A).unwrap().leaf;
    let parent = t.node(child).parent.unwrap();
    let v = select_victims_lru(&t, 20);
    assert_eq!(v.victims, vec![child, parent]);
}

#[test]
fn locked_nodes_are_skipped() {
    let (mut t, ids) = three_leaves([100, 200, 300]);
    t.lock_path(ids[&100]);
    let v = select_victims_lru(&t, 10);
    assert_eq!(v.victims, vec![ids[&200]]);
}

#[test]
fn lifecycle_prefers_retired() {
    let (mut t, ids) = three_leaves([100, 200, 300]);
    t.on_workflow_terminated(2);
    t.on_workflow_terminated(9);
    // Node 300 was last touched, but it is the only retired one.
    let v = select_victims_lifecycle(&t, 1);
    assert_eq!(v.victims, vec![ids[&300]]);
}

#[test]
fn lifecycle_prefers_less_popular_retired() {
    let mut t = CacheTree::new(1000, 0);
    let lonely = t.insert_suffix(&seq(0, 10), 0, A).unwrap().leaf;
    let popular = t.insert_suffix(&seq(100, 10), 1, A).unwrap().leaf;
    for wf in 2..8 {
        t.match_prefix(&seq(100, 10), wf, B);
    }
    t.match_prefix(&seq(0, 10), 0, A);
    for wf in 0..8 {
        t.on_workflow_terminated(wf);
    }
    assert_eq!(t.node(popular).historical_workflows(), 7);
    let v = select_victims_lifecycle(&t, 1);
    assert_eq!(v.victims, vec![lonely]);
}

#[test]
fn lifecycle_without_retired_is_lru() {
    let (t, _) = three_leaves([200, 300, 100]);
    for need in [1, 15, 30, 100] {
        assert_eq!(select_victims_lifecycle(&t, need), select_victims_lru(&t, need));
    }
}

fn uniform_forecasts(t: &CacheTree, agents: usize) -> BTreeMap<WorkflowId, Forecast> {
    let wfs: BTreeSet<WorkflowId> = t.nodes().flat_map(|n| n.access.keys().copied()).collect();
    wfs.into_iter().map(|w| (w, Forecast::uniform(agents, 3))).collect()
}

#[test]
fn hierarchical_drains_retired_first() {
    let mut t = CacheTree::new(1000, 0);
    let retired = t.insert_suffix(&seq(0, 10), 0, A).unwrap().leaf;
    let active = t.insert_suffix(&seq(100, 10), 1, A).unwrap().leaf;
    t.set_score(retired, 5.0);
    t.on_workflow_terminated(0);
    t.set_score(active, 0.01);
    let mut heap = ScoreHeap::new();
    heap.sync(&mut t);
    assert_eq!(select_victims_hierarchical(&t, 1, &heap).victims, vec![retired]);
}

#[test]
fn hierarchical_orders_active_by_score() {
    let mut t = CacheTree::new(1000, 0);
    let mut ids = Vec::new();
    for (wf, score) in [0.9, 0.1, 0.5].into_iter().enumerate() {
        let id = t.insert_suffix(&seq(100 * wf as u32, 10), wf as u64, A).unwrap().leaf;
        t.set_score(id, score);
        ids.push(id);
    }
    let mut heap = ScoreHeap::new();
    heap.sync(&mut t);
    let v = select_victims_hierarchical(&t, 30, &heap);
    assert_eq!(v.victims, vec![ids[1], ids[2], ids[0]]);
}

#[test]
fn hierarchical_with_equal_scores_is_lru() {
    let (mut t, _) = three_leaves([300, 100, 200]);
    let fs = uniform_forecasts(&t, 2);
    let mut heap = ScoreHeap::new();
    heap.sync(&mut t);
    for wf in [0, 1, 2, 9] {
        refresh_scores(&mut t, wf, &fs, ScoreParams::default(), &mut heap).unwrap();
    }
    // Node scores differ only through the shared reader 9, which touched
    // all three, so they are equal.
    for need in [1, 15, 30] {
        assert_eq!(select_victims_hierarchical(&t, need, &heap).victims, select_victims_lru(&t, need).victims);
    }
}

#[test]
fn kvflow_evicts_farthest() {
    let mut t = CacheTree::new(1000, 0);
    let near = t.insert_suffix(&seq(0, 10), 0, A).unwrap().leaf;
    let far = t.insert_suffix(&seq(100, 10), 1, B).unwrap().leaf;
    let schedules = BTreeMap::from([
        (0, vec![A]),
        (1, vec![A, A, A, A, B]),
    ]);
    assert_eq!(steps_to_execution(&t, near, &schedules).unwrap(), Some(1));
    assert_eq!(steps_to_execution(&t, far, &schedules).unwrap(), Some(5));
    assert_eq!(select_victims_kvflow(&t, 1, &schedules).unwrap().victims, vec![far]);
}

#[test]
fn kvflow_treats_never_as_farthest() {
    let mut t = CacheTree::new(1000, 0);
    let soon = t.insert_suffix(&seq(0, 10), 0, A).unwrap().leaf;
    let never = t.insert_suffix(&seq(100, 10), 1, B).unwrap().leaf;
    t.match_prefix(&seq(0, 10), 0, A);
    let schedules = BTreeMap::from([(0, vec![B, B, B, B, B, B, A]), (1, vec![A])]);
    assert_eq!(steps_to_execution(&t, never, &schedules).unwrap(), None);
    let v = select_victims_kvflow(&t, 20, &schedules).unwrap();
    assert_eq!(v.victims, vec![never, soon]);
    assert_eq!(
        select_victims_kvflow(&t, 1, &BTreeMap::new()),
        Err(PolicyError::MissingSchedule(0))
    );
}

#[test]
fn victims_free_enough_on_random_trees() {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = CacheTree::new(400, 0);
        for _ in 0..40 {
            let tokens: Vec<u32> = (0..rng.gen_range(1..12)).map(|_| rng.gen_range(0..3)).collect();
            let wf = rng.gen_range(0..6);
            let _ = t.insert_suffix(&tokens, wf, AgentId(rng.gen_range(0..3)));
        }
        for wf in 0..3 {
            if rng.gen_bool(0.5) {
                t.on_workflow_terminated(wf);
            }
        }
        let fs = uniform_forecasts(&t, 3);
        let mut heap = ScoreHeap::new();
        heap.sync(&mut t);
        for wf in 0..6 {
            refresh_scores(&mut t, wf, &fs, ScoreParams::default(), &mut heap).unwrap();
        }
        let needed = rng.gen_range(1..=t.tiers().device_used + 5);
        for v in [
            select_victims_lru(&t, needed),
            select_victims_lifecycle(&t, needed),
            select_victims_hierarchical(&t, needed, &heap),
        ] {
            let distinct: BTreeSet<_> = v.victims.iter().collect();
            assert_eq!(distinct.len(), v.victims.len());
            assert_eq!(v.freed, v.victims.iter().map(|&id| t.node(id).token_len()).sum::<usize>());
            assert_eq!(v.shortfall, v.freed < needed);
            // Evicting in order always removes a current device leaf.
            let mut scratch = t.clone();
            for &id in &v.victims {
                assert!(scratch.is_evictable(id));
                scratch.drop_node(id).unwrap();
            }
            scratch.audit().unwrap();
        }
    }
}

fn host_setup() -> (CacheTree, NodeId, NodeId, NodeId) {
    // Host children of a shared 10-token device prefix, sizes 50/40/10,
    // touched by workflows 1/2/3 as agents 0/1/2.
    let mut t = CacheTree::new(200, 200);
    t.insert_suffix(&seq(0, 10), 0, A).unwrap();
    let mut ids = Vec::new();
    for (i, len) in [50usize, 40, 10].into_iter().enumerate() {
        let mut s = seq(0, 10);
        s.extend(seq(1000 * (i as u32 + 1), len));
        let id = t.insert_suffix(&s, i as u64 + 1, AgentId(i)).unwrap().leaf;
        ids.push(id);
    }
    for &id in &ids {
        t.demote_to_host(id).unwrap();
    }
    (t, ids[0], ids[1], ids[2])
}

fn point_forecast(agents: usize, agent: usize, p: f64) -> Forecast {
    let mut d = vec![0.0; agents + 1];
    d[agent] = p;
    d[agents] = 1.0 - p;
    Forecast::new(agents, vec![d; 3]).unwrap()
}

/// Values 0.9 / 0.8 / 0.7 on the 50 / 40 / 10 token host nodes.
fn graded_forecasts() -> BTreeMap<WorkflowId, Forecast> {
    BTreeMap::from([
        (0, Forecast::ended(3, 3)),
        (1, point_forecast(3, 0, 0.9)),
        (2, point_forecast(3, 1, 0.8)),
        (3, point_forecast(3, 2, 0.7)),
    ])
}

fn knapsack(items: &[(usize, f64)], cap: usize) -> f64 {
    let mut best: f64 = 0.0;
    for mask in 0u32..1 << items.len() {
        let (mut w, mut v) = (0, 0.0);
        for (i, &(iw, iv)) in items.iter().enumerate() {
            if mask >> i & 1 == 1 {
                w += iw;
                v += iv;
            }
        }
        if w <= cap {
            best = best.max(v);
        }
    }
    best
}

#[test]
fn greedy_prefetch_skips_what_does_not_fit() {
    let (t, big, mid, small) = host_setup();
    let plan = plan_conservative_prefetch(&t, &graded_forecasts(), 60, 1).unwrap();
    assert_eq!(plan.budget(), 60);
    assert_eq!(plan.selected, vec![big, small]);
    assert_eq!(plan.selected_tokens, 60);
    let order: Vec<NodeId> = plan.candidates.iter().map(|c| c.node).collect();
    assert_eq!(order, vec![big, mid, small]);
    assert!(plan.candidates.windows(2).all(|w| w[0].value >= w[1].value));
    // Exact knapsack finds the same 1.6 at this budget.
    assert!((knapsack(&[(50, 0.9), (40, 0.8), (10, 0.7)], 60) - 1.6).abs() < 1e-12);
}

#[test]
fn greedy_gap_against_exact_knapsack() {
    // At 50 tokens greedy stops after the 0.9 item; 40 + 10 would give 1.5.
    let (t, big, _, _) = host_setup();
    let plan = plan_conservative_prefetch(&t, &graded_forecasts(), 50, 1).unwrap();
    assert_eq!(plan.selected, vec![big]);
    assert!((knapsack(&[(50, 0.9), (40, 0.8), (10, 0.7)], 50) - 1.5).abs() < 1e-12);
}

#[test]
fn zero_space_means_empty_plan() {
    let (mut t, _, _, _) = host_setup();
    t.insert_suffix(&seq(5000, 190), 7, A).unwrap();
    assert_eq!(t.tiers().free_device(), 0);
    let fs: BTreeMap<_, _> = (0..8).map(|w| (w, Forecast::uniform(3, 3))).collect();
    let plan = plan_conservative_prefetch(&t, &fs, 1000, 1).unwrap();
    assert_eq!(plan.budget_space, 0);
    assert!(plan.selected.is_empty());
    assert!(plan.displaced.is_empty());
}

#[test]
fn bandwidth_caps_the_plan() {
    let (t, _, _, _) = host_setup();
    let fs: BTreeMap<_, _> = (0..4).map(|w| (w, Forecast::uniform(3, 3))).collect();
    let plan = plan_conservative_prefetch(&t, &fs, 60, 1).unwrap();
    assert!(plan.budget_space >= 100);
    assert_eq!(plan.budget_bw, 60);
    assert!(plan.selected_tokens <= 60);
    let plan = plan_conservative_prefetch(&t, &fs, 30, 2).unwrap();
    assert!(plan.selected_tokens <= 60);
}

#[test]
fn conservative_displaces_only_retired() {
    let (mut t, big, _, _) = host_setup();
    let retired = t.insert_suffix(&seq(7000, 100), 8, A).unwrap().leaf;
    let active = t.insert_suffix(&seq(8000, 90), 9, A).unwrap().leaf;
    t.on_workflow_terminated(8);
    assert_eq!(t.tiers().free_device(), 0);
    let mut fs = graded_forecasts();
    fs.insert(9, point_forecast(3, 0, 0.9));
    let plan = plan_conservative_prefetch(&t, &fs, 1000, 1).unwrap();
    assert_eq!(plan.budget_space, 100);
    assert_eq!(plan.selected[0], big);
    assert_eq!(plan.displaced, vec![retired]);
    assert!(!plan.displaced.contains(&active));
}

#[test]
fn aggressive_with_zero_rho_matches_conservative() {
    let (mut t, _, _, _) = host_setup();
    t.insert_suffix(&seq(7000, 100), 8, A).unwrap();
    t.on_workflow_terminated(8);
    let fs = graded_forecasts();
    let mut heap = ScoreHeap::new();
    heap.sync(&mut t);
    let c = plan_conservative_prefetch(&t, &fs, 80, 1).unwrap();
    let a = plan_aggressive_prefetch(&t, &fs, 80, 1, 0.0, &heap).unwrap();
    assert_eq!(c, a);
    assert_eq!(plan_aggressive_prefetch(&t, &fs, 80, 1, 1.5, &heap), Err(PolicyError::Rho(1.5)));
}

#[test]
fn aggressive_displaces_lowest_scores_first() {
    let (mut t, big, _, _) = host_setup();
    let low = t.insert_suffix(&seq(7000, 80), 8, A).unwrap().leaf;
    let high = t.insert_suffix(&seq(8000, 40), 9, A).unwrap().leaf;
    let shared = t.node(big).parent.unwrap();
    assert_eq!(t.tiers().free_device(), 70);
    let mut fs = graded_forecasts();
    fs.insert(8, point_forecast(3, 0, 0.05));
    fs.insert(9, point_forecast(3, 0, 0.95));
    let mut heap = ScoreHeap::new();
    heap.sync(&mut t);
    for wf in 0..10 {
        refresh_scores(&mut t, wf, &fs, ScoreParams::default(), &mut heap).unwrap();
    }
    let conservative = plan_conservative_prefetch(&t, &fs, 1000, 1).unwrap();
    assert_eq!(conservative.selected_tokens, 60);
    assert!(conservative.displaced.is_empty());

    let plan = plan_aggressive_prefetch(&t, &fs, 1000, 1, 1.0, &heap).unwrap();
    assert_eq!(plan.selected_tokens, 100);
    assert_eq!(plan.displaced, vec![low]);
    assert!(!plan.displaced.contains(&shared) && !plan.displaced.contains(&high));

    // A tight displacement budget keeps the plan within free space.
    let plan = plan_aggressive_prefetch(&t, &fs, 1000, 1, 0.1, &heap).unwrap();
    assert_eq!(plan.budget_displace, 20);
    assert!(plan.displaced.is_empty() || plan.displaced == vec![low]);
    let displaced: usize = plan.displaced.iter().map(|&id| t.node(id).token_len()).sum();
    assert!(plan.selected_tokens <= t.tiers().free_device() + displaced);
}

#[test]
fn hierarchical_at_one_step_evicts_the_cheapest_subset() {
    use lookahead_kv::theory::random_forecast;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let params = ScoreParams::new(1, 0.5).unwrap();
    for seed in 0..300 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=8);
        let agents = 3;
        let mut t = CacheTree::new(1000, 0);
        let mut leaves = Vec::new();
        for i in 0..n {
            let wf = rng.gen_range(0..4);
            leaves.push(t.insert_suffix(&[i as u32 + 1], wf, AgentId(rng.gen_range(0..agents))).unwrap().leaf);
        }
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            t.match_prefix(&[i as u32 + 1], rng.gen_range(0..4), AgentId(rng.gen_range(0..agents)));
        }
        let fs: BTreeMap<WorkflowId, Forecast> = (0..4).map(|w| (w, random_forecast(&mut rng, agents, 1))).collect();
        let mut heap = ScoreHeap::new();
        for wf in 0..4 {
            refresh_scores(&mut t, wf, &fs, params, &mut heap).unwrap();
        }
        heap.sync(&mut t);
        // One-step value by hand: sum over readers of the probability that
        // one of their agents on the node runs next.
        let value = |id: NodeId| -> f64 {
            t.node(id)
                .access
                .iter()
                .map(|(wf, mask)| mask.iter().map(|a| fs[wf].step(0)[a.index()]).sum::<f64>())
                .sum()
        };
        let values: Vec<f64> = leaves.iter().map(|&id| value(id)).collect();
        for budget in 1..n {
            let v = select_victims_hierarchical(&t, budget, &heap);
            assert_eq!(v.victims.len(), budget);
            let got: f64 = v.victims.iter().map(|&id| value(id)).sum();
            let mut best = f64::INFINITY;
            for mask in 0u32..1 << n {
                if mask.count_ones() as usize == budget {
                    let total: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| values[i]).sum();
                    best = best.min(total);
                }
            }
            assert!((got - best).abs() < 1e-12, "seed {seed} budget {budget}: {got} vs {best}");
        }
    }
}

#[test]
fn conservative_prefetch_never_lowers_device_score_mass() {
    use lookahead_kv::cache::Tier;
    use lookahead_kv::theory::random_forecast;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let params = ScoreParams::default();
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = CacheTree::new(120, 400);
        for _ in 0..30 {
            let tokens: Vec<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..3)).collect();
            let needed = tokens.len();
            if t.tiers().free_device() < needed {
                let v = select_victims_lru(&t, needed);
                for id in v.victims {
                    t.demote_to_host(id).unwrap();
                }
            }
            let _ = t.insert_suffix(&tokens, rng.gen_range(0..5), AgentId(rng.gen_range(0..3)));
        }
        for wf in 0..2 {
            if rng.gen_bool(0.4) {
                t.on_workflow_terminated(wf);
            }
        }
        let fs: BTreeMap<WorkflowId, Forecast> = (0..5).map(|w| (w, random_forecast(&mut rng, 3, 3))).collect();
        let mut heap = ScoreHeap::new();
        for wf in 0..5 {
            refresh_scores(&mut t, wf, &fs, params, &mut heap).unwrap();
        }
        let mass = |t: &CacheTree| -> f64 {
            t.nodes().filter(|n| n.tier == Tier::Device && !n.retired).map(|n| n.score).sum()
        };
        let before = mass(&t);
        let bandwidth = rng.gen_range(1..60);
        let plan = plan_conservative_prefetch(&t, &fs, bandwidth, 1).unwrap();
        assert!(plan.selected_tokens <= plan.budget());
        assert!(plan.selected_tokens <= bandwidth);
        let mut after = t.clone();
        for &d in &plan.displaced {
            assert!(after.node(d).retired);
            after.drop_node(d).unwrap();
        }
        for &s in &plan.selected {
            let parent = after.node(s).parent.unwrap();
            assert_eq!(after.node(parent).tier, Tier::Device);
            after.promote_to_device(s).unwrap();
        }
        after.audit().unwrap();
        assert!(mass(&after) >= before - 1e-12, "seed {seed}");
    }
}
