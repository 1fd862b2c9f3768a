use std::collections::BTreeMap;

use lookahead_kv::cache::{CacheTree, NodeId};
use lookahead_kv::callgraph::{AgentId, AgentMask, WorkflowId};
use lookahead_kv::predictor::Forecast;
use lookahead_kv::scoring::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn forecast(steps: Vec<Vec<f64>>) -> Forecast {
    let n = steps[0].len() - 1;
    Forecast::new(n, steps).unwrap()
}

fn one(wf: WorkflowId, f: Forecast) -> BTreeMap<WorkflowId, Forecast> {
    BTreeMap::from([(wf, f)])
}

/// Term-by-term expansion with its own survival products and no shared helpers.
fn brute_score(
    access: &[(WorkflowId, AgentMask)],
    forecasts: &BTreeMap<WorkflowId, Forecast>,
    horizon: usize,
    gamma: f64,
) -> f64 {
    let mut total = 0.0;
    for k in 1..=horizon {
        let discount = gamma.powi(k as i32 - 1);
        for (wf, mask) in access {
            let f = &forecasts[wf];
            let end = f.num_agents();
            let mut survival = 1.0;
            for j in 1..k {
                survival *= 1.0 - f.steps()[j - 1][end];
            }
            let mut dot = 0.0;
            for a in 0..end {
                let indicator = if mask.0 >> a & 1 == 1 { 1.0 } else { 0.0 };
                dot += indicator * f.steps()[k - 1][a];
            }
            total += discount * survival * dot;
        }
    }
    total
}

fn random_forecast(rng: &mut ChaCha8Rng, n: usize, horizon: usize) -> Forecast {
    let steps = (0..horizon)
        .map(|_| {
            let raw: Vec<f64> = (0..=n).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        })
        .collect();
    Forecast::new(n, steps).unwrap()
}

#[test]
fn survival_examples() {
    let f = forecast(vec![vec![1.0, 0.0]; 3]);
    assert_eq!(survival_probs(&f), vec![1.0, 1.0, 1.0]);
    let f = forecast(vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![1.0, 0.0]]);
    assert_eq!(survival_probs(&f), vec![1.0, 0.5, 0.25]);
    let f = forecast(vec![vec![0.0, 1.0], vec![0.3, 0.7], vec![0.3, 0.7]]);
    assert_eq!(survival_probs(&f), vec![1.0, 0.0, 0.0]);
}

#[test]
fn value_examples() {
    assert_eq!(single_step_value(&[], &BTreeMap::new()).unwrap(), 0.0);
    let f = forecast(vec![vec![0.2, 0.3, 0.5, 0.0]]);
    let mask = AgentMask::from_agents([AgentId(0), AgentId(2)]);
    let v = single_step_value(&[(1, mask)], &one(1, f)).unwrap();
    assert!((v - 0.7).abs() < 1e-12);

    let fs = BTreeMap::from([
        (1, forecast(vec![vec![0.4, 0.6, 0.0]])),
        (2, forecast(vec![vec![0.75, 0.25, 0.0]])),
    ]);
    let a = AgentMask::single(AgentId(0));
    let b = AgentMask::single(AgentId(1));
    let v = single_step_value(&[(1, a), (2, b)], &fs).unwrap();
    assert!((v - 0.65).abs() < 1e-12);
}

#[test]
fn missing_forecast_is_an_error() {
    let mask = AgentMask::single(AgentId(0));
    assert_eq!(single_step_value(&[(9, mask)], &BTreeMap::new()), Err(ScoreError::MissingForecast(9)));
    let fs = one(9, forecast(vec![vec![1.0, 0.0]]));
    assert!(matches!(
        multi_step_score(&[(9, mask)], &fs, ScoreParams::default()),
        Err(ScoreError::ShortForecast { .. })
    ));
}

#[test]
fn hand_evaluated_score() {
    let f = forecast(vec![vec![0.5, 0.3, 0.2]; 3]);
    let s = multi_step_score(&[(1, AgentMask::single(AgentId(0)))], &one(1, f), ScoreParams::default()).unwrap();
    assert!((s - 0.9368).abs() < 1e-12, "{s}");
}

#[test]
fn horizon_one_is_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let f = random_forecast(&mut rng, 4, 3);
        let mask = AgentMask(rng.gen_range(0..16));
        let fs = one(0, f);
        let gamma = rng.gen_range(0.05..0.95);
        let s = multi_step_score(&[(0, mask)], &fs, ScoreParams { horizon: 1, gamma }).unwrap();
        assert_eq!(s, single_step_value(&[(0, mask)], &fs).unwrap());
    }
}

#[test]
fn params_validate() {
    assert!(ScoreParams::new(0, 0.5).is_err());
    assert!(ScoreParams::new(3, 1.0).is_err());
    assert!(ScoreParams::new(3, 0.0).is_err());
    let p = ScoreParams::new(3, 0.5).unwrap();
    assert!((p.lipschitz_constant() - 0.875).abs() < 1e-12);
    assert_eq!(p.loose_lipschitz_constant(), 1.0);
}

#[test]
fn score_matches_term_by_term_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=6);
        let horizon = rng.gen_range(1..=5);
        let gamma = rng.gen_range(0.05..0.95);
        let workflows = rng.gen_range(0..=4);
        let mut fs = BTreeMap::new();
        let mut access = Vec::new();
        for wf in 0..workflows {
            fs.insert(wf, random_forecast(&mut rng, n, horizon));
            access.push((wf, AgentMask(rng.gen_range(0..1u64 << n))));
        }
        let s = multi_step_score(&access, &fs, ScoreParams { horizon, gamma }).unwrap();
        assert!((s - brute_score(&access, &fs, horizon, gamma)).abs() <= 1e-9);
    }
}

proptest! {
    #[test]
    fn score_bounds_monotonicity_and_additivity(
        seed in any::<u64>(), n in 1usize..6, horizon in 1usize..5, gamma in 0.05f64..0.95,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ScoreParams { horizon, gamma };
        let mut fs = BTreeMap::new();
        let mut access = Vec::new();
        for wf in 0..4u64 {
            fs.insert(wf, random_forecast(&mut rng, n, horizon));
            access.push((wf, AgentMask(rng.gen_range(0..1u64 << n))));
        }
        let s = multi_step_score(&access, &fs, params).unwrap();
        let cap: f64 = (0..horizon).map(|k| gamma.powi(k as i32)).sum::<f64>() * access.len() as f64;
        prop_assert!(s >= 0.0 && s <= cap + 1e-12);

        let bit = rng.gen_range(0..n);
        let mut more = access.clone();
        more[0].1.insert(AgentId(bit));
        prop_assert!(multi_step_score(&more, &fs, params).unwrap() >= s - 1e-15);

        let left = multi_step_score(&access[..2], &fs, params).unwrap();
        let right = multi_step_score(&access[2..], &fs, params).unwrap();
        prop_assert!((left + right - s).abs() < 1e-12);
    }
}

fn key(primary: f64, last_access: u64, node: NodeId) -> EvictionKey {
    EvictionKey { retired: false, primary, last_access, depth: 0, node }
}

#[test]
fn key_order_puts_retired_first_then_scores() {
    let retired = EvictionKey { retired: true, primary: 7.0, last_access: 99, depth: 0, node: 1 };
    assert!(retired < key(0.01, 0, 2));
    assert!(key(0.1, 5, 3) < key(0.5, 1, 4));
    assert!(key(0.5, 1, 4) < key(0.5, 2, 3));
}

#[test]
fn heap_pops_ascending() {
    let mut h = ScoreHeap::new();
    for (i, s) in [0.9, 0.1, 0.5].into_iter().enumerate() {
        h.upsert(key(s, 0, i + 1));
    }
    let order: Vec<NodeId> = std::iter::from_fn(|| h.pop()).map(|k| k.node).collect();
    assert_eq!(order, vec![2, 3, 1]);
}

#[test]
fn heap_matches_rebuild_under_random_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut h = ScoreHeap::new();
    let mut truth: BTreeMap<NodeId, EvictionKey> = BTreeMap::new();
    for step in 0..5000u64 {
        let id = rng.gen_range(1..300);
        if rng.gen_bool(0.2) {
            h.remove(id);
            truth.remove(&id);
        } else {
            let k = EvictionKey {
                retired: rng.gen_bool(0.2),
                primary: rng.gen_range(0..20) as f64 / 4.0,
                last_access: step,
                depth: rng.gen_range(0..5),
                node: id,
            };
            h.upsert(k);
            truth.insert(id, k);
        }
        let n = h.len().max(1);
        let bound = (n as f64).log2().ceil() as usize + 1;
        assert!(h.last_sift_depth() <= bound, "sift {} > {bound}", h.last_sift_depth());
    }
    h.audit().unwrap();
    let mut expected: Vec<EvictionKey> = truth.values().copied().collect();
    expected.sort();
    let ids = |v: &[EvictionKey]| v.iter().map(|k| k.node).collect::<Vec<_>>();
    assert_eq!(ids(&h.ascending().collect::<Vec<_>>()), ids(&expected));
    assert_eq!(ids(&h.sorted_keys()), ids(&expected));
    let popped: Vec<EvictionKey> = std::iter::from_fn(|| h.pop()).collect();
    assert_eq!(ids(&popped), ids(&expected));
}

#[test]
fn refresh_touches_only_the_changed_workflow() {
    let mut tree = CacheTree::new(1000, 0);
    let a = AgentId(0);
    tree.insert_suffix(&[1, 2, 3], 1, a).unwrap();
    tree.insert_suffix(&[1, 2, 3, 4], 1, a).unwrap();
    tree.insert_suffix(&[1, 2, 3, 4, 5], 1, a).unwrap();
    tree.insert_suffix(&[9, 9], 2, a).unwrap();
    let mut heap = ScoreHeap::new();
    heap.sync(&mut tree);
    let mut fs = BTreeMap::from([
        (1, forecast(vec![vec![0.6, 0.4]; 3])),
        (2, forecast(vec![vec![0.8, 0.2]; 3])),
    ]);
    let params = ScoreParams::default();
    assert_eq!(refresh_scores(&mut tree, 1, &fs, params, &mut heap).unwrap(), 3);
    assert_eq!(refresh_scores(&mut tree, 2, &fs, params, &mut heap).unwrap(), 1);
    let other = tree.workflow_nodes(2).next().unwrap();
    let before = tree.node(other).score;
    assert!(before > 0.0);

    tree.on_workflow_terminated(1);
    fs.remove(&1);
    heap.sync(&mut tree);
    assert_eq!(refresh_scores(&mut tree, 1, &fs, params, &mut heap).unwrap(), 3);
    for id in tree.workflow_nodes(1).collect::<Vec<_>>() {
        assert_eq!(tree.node(id).score, 0.0);
    }
    assert_eq!(tree.node(other).score, before);
    heap.sync(&mut tree);
    heap.audit().unwrap();
    let order: Vec<NodeId> = heap.ascending().map(|k| k.node).collect();
    assert_eq!(*order.last().unwrap(), other);
}

#[test]
fn unchanged_forecast_keeps_heap_order() {
    let mut tree = CacheTree::new(1000, 0);
    for wf in 0..5u64 {
        tree.insert_suffix(&[wf as u32 * 10, 1, 2], wf, AgentId((wf % 2) as usize)).unwrap();
    }
    let fs: BTreeMap<_, _> = (0..5u64).map(|wf| (wf, forecast(vec![vec![0.3, 0.5, 0.2]; 3]))).collect();
    let mut heap = ScoreHeap::new();
    heap.sync(&mut tree);
    for wf in 0..5 {
        refresh_scores(&mut tree, wf, &fs, ScoreParams::default(), &mut heap).unwrap();
    }
    let before: Vec<NodeId> = heap.ascending().map(|k| k.node).collect();
    refresh_scores(&mut tree, 3, &fs, ScoreParams::default(), &mut heap).unwrap();
    let after: Vec<NodeId> = heap.ascending().map(|k| k.node).collect();
    assert_eq!(before, after);
}

#[test]
fn incremental_heap_equals_full_rebuild_on_random_streams() {
    let params = ScoreParams::default();
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = CacheTree::new(200, 100);
        let mut heap = ScoreHeap::new();
        let mut fs: BTreeMap<WorkflowId, Forecast> = BTreeMap::new();
        let mut active: Vec<WorkflowId> = Vec::new();
        let mut next_wf = 0;
        for _ in 0..200 {
            match rng.gen_range(0..10) {
                0..=4 => {
                    if active.len() < 4 {
                        active.push(next_wf);
                        next_wf += 1;
                    }
                    let wf = active[rng.gen_range(0..active.len())];
                    let len = rng.gen_range(1..8);
                    let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..3)).collect();
                    fs.insert(wf, random_forecast(&mut rng, 3, params.horizon));
                    let agent = AgentId(rng.gen_range(0..3));
                    if tree.peek_prefix(&tokens).1 == 0 {
                        let _ = tree.insert_suffix(&tokens, wf, agent);
                    } else {
                        tree.match_prefix(&tokens, wf, agent);
                    }
                    heap.sync(&mut tree);
                    refresh_scores(&mut tree, wf, &fs, params, &mut heap).unwrap();
                }
                5..=6 => {
                    let leaves: Vec<NodeId> =
                        tree.nodes().filter(|n| tree.is_evictable(n.id)).map(|n| n.id).collect();
                    if let Some(&id) = leaves.get(rng.gen_range(0..leaves.len().max(1))) {
                        tree.demote_to_host(id).unwrap();
                    }
                }
                7 if !active.is_empty() => {
                    let wf = active.remove(rng.gen_range(0..active.len()));
                    tree.on_workflow_terminated(wf);
                    fs.remove(&wf);
                    heap.sync(&mut tree);
                    refresh_scores(&mut tree, wf, &fs, params, &mut heap).unwrap();
                }
                _ => {}
            }
            heap.sync(&mut tree);
            heap.audit().unwrap();
            let rebuilt = ScoreHeap::rebuild(&tree);
            let ids = |h: &ScoreHeap| h.sorted_keys().iter().map(|k| (k.node, k.primary.to_bits())).collect::<Vec<_>>();
            assert_eq!(ids(&heap), ids(&rebuilt));
        }
        // Scores stored on nodes equal a from-scratch recompute.
        for n in tree.nodes() {
            let fresh = node_score(&tree, n.id, &fs, params).unwrap();
            assert!((n.score - fresh).abs() < 1e-12);
        }
    }
}

#[test]
fn score_snapshot_csv() {
    let mut tree = CacheTree::new(10, 0);
    tree.insert_suffix(&[1, 2], 1, AgentId(0)).unwrap();
    let mut buf = Vec::new();
    write_scores_csv(&tree, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "node_id,score\n1,0\n");
}

#[test]
fn sync_picks_up_scores_set_on_the_tree() {
    let mut tree = CacheTree::new(1000, 0);
    let a = AgentId(0);
    tree.insert_suffix(&[1, 2], 1, a).unwrap();
    tree.insert_suffix(&[3, 4], 1, a).unwrap();
    let mut heap = ScoreHeap::new();
    heap.sync(&mut tree);
    let first = heap.peek().unwrap().node;
    tree.set_score(first, 0.5);
    heap.sync(&mut tree);
    heap.audit().unwrap();
    assert_ne!(heap.peek().unwrap().node, first);
    assert_eq!(heap.sorted_keys(), ScoreHeap::rebuild(&tree).sorted_keys());
}
