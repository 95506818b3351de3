mod common;

use std::collections::VecDeque;

use common::{connected_graph, graph_and_perm, matrix_power};
use hodgnn::deriv::{bell, compute_all, deriv_init, set_partitions, stirling2, DerivConfig, DerivKey, Slot, Support, PRUNE_TOL};
use hodgnn::graph::{count_triangles, gen_erdos_renyi};
use hodgnn::mpnn::{gin_identity_init, MpnnModel, RandomGin};
use hodgnn::verify::{fd_check, random_fd_case, FdTolerance};
use hodgnn::{Activation, Graph};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_features(g: &Graph, width: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((g.num_nodes(), width), |_| rng.gen_range(-1.0..1.0));
    g.clone().with_features(x).unwrap()
}

fn random_model(input_width: usize, activation: Activation, seed: u64) -> MpnnModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RandomGin {
        input_width,
        hidden: 2,
        depth: rng.gen_range(1..=3),
        activation,
        concat: rng.gen_bool(0.5),
        residual: rng.gen_bool(0.5),
        readout: Some(1),
        bound: 0.5,
    }
    .sample(&mut rng)
}

fn hop_distances(g: &Graph, source: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.num_nodes()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        for &u in g.neighbors(v) {
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
    dist
}

fn analytic() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Tanh), Just(Activation::Sin), Just(Activation::Silu)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn entries_match_finite_differences(seed in any::<u32>()) {
        let case = random_fd_case(seed as u64, 3).unwrap();
        let report = fd_check(&case.model, &case.graph, case.k, case.max_order, FdTolerance::default()).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn linear_model_is_matrix_power(g in connected_graph(9), depth in 1usize..=3, eps in prop_oneof![Just(-1.0), Just(0.0), Just(0.5)]) {
        let model = gin_identity_init(depth, 1, eps);
        let d = compute_all(&model, &g, &DerivConfig::new(1, 2).unwrap()).unwrap();
        let shifted = g.dense_adjacency() + Array2::<f64>::eye(g.num_nodes()) * (1.0 + eps);
        let expected = matrix_power(&shifted, depth);
        for (v, key, x) in d.node.iter() {
            prop_assert_eq!(key.total_order(), 1);
            let u = key.slots()[0].node;
            prop_assert!((x[0] - expected[[v, u]]).abs() < 1e-12);
        }
        let nonzero = expected.iter().filter(|x| x.abs() >= PRUNE_TOL).count();
        prop_assert_eq!(d.node.nnz(), nonzero);

        let pairs = compute_all(&model, &g, &DerivConfig::new(2, 2).unwrap()).unwrap();
        prop_assert!(pairs.node.iter().all(|(_, key, _)| key.arity() == 1 && key.total_order() == 1));
    }

    #[test]
    fn relabeling_permutes_entries((g, perm) in graph_and_perm(8), act in analytic(), seed in any::<u16>(), k in 1usize..=2, order in 1usize..=3) {
        let g = random_features(&g, 2, seed as u64);
        let model = random_model(2, act, seed as u64);
        let cfg = DerivConfig::new(k, order).unwrap();
        let d = compute_all(&model, &g, &cfg).unwrap();
        let e = compute_all(&model, &g.permuted(&perm).unwrap(), &cfg).unwrap();
        prop_assert!(d.node.relabeled(&perm).max_abs_diff(&e.node) < 1e-10);
        let (dout, eout) = (d.out.unwrap(), e.out.unwrap());
        prop_assert!(dout.relabeled(&perm).max_abs_diff(&eout) < 1e-10);
    }

    #[test]
    fn entries_stay_inside_receptive_field(g in connected_graph(10), act in analytic(), seed in any::<u16>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let model = RandomGin { input_width: 1, hidden: 2, depth: 3, activation: act, concat: false, residual: false, readout: None, bound: 0.5 }
            .sample(&mut rng);
        let d = compute_all(&model, &g, &DerivConfig::new(1, 2).unwrap()).unwrap();
        let dist: Vec<Vec<usize>> = (0..g.num_nodes()).map(|v| hop_distances(&g, v)).collect();
        for (t, layer) in d.layers.iter().enumerate() {
            for (v, key, _) in layer.iter() {
                prop_assert!(dist[v][key.slots()[0].node] <= t);
            }
        }
    }

    #[test]
    fn pair_lookup_is_order_free(g in connected_graph(7), seed in any::<u16>()) {
        let g = random_features(&g, 1, seed as u64);
        let model = random_model(1, Activation::Tanh, seed as u64);
        let d = compute_all(&model, &g, &DerivConfig::new(2, 3).unwrap()).unwrap();
        for (v, key, x) in d.node.iter() {
            let mut reversed: Vec<Slot> = key.slots().to_vec();
            reversed.reverse();
            prop_assert_eq!(d.node.lookup(v, &reversed).unwrap(), Some(x));
            prop_assert_eq!(DerivKey::new(&reversed).unwrap(), *key);
        }
    }

    #[test]
    fn stored_entries_are_finite_and_above_threshold(g in connected_graph(9), act in analytic(), seed in any::<u16>(), k in 1usize..=2) {
        let g = random_features(&g, 1, seed as u64);
        let model = random_model(1, act, seed as u64);
        let cfg = DerivConfig::new(k, 2).unwrap();
        let d = compute_all(&model, &g, &cfg).unwrap();
        for layer in d.layers.iter().chain([&d.node]) {
            for (_, _, x) in layer.iter() {
                prop_assert!(x.iter().all(|a| a.is_finite()));
                prop_assert!(x.iter().any(|a| a.abs() >= PRUNE_TOL));
            }
            let stats = layer.stats();
            prop_assert_eq!(stats.total, layer.nnz());
            prop_assert_eq!(stats.max, *stats.per_node.iter().max().unwrap());
        }
        let full = compute_all(&model, &g, &cfg.clone().with_support(Support::Structural)).unwrap();
        prop_assert!(d.node.iter().all(|(v, key, _)| full.node.get(v, key).is_some()));
        prop_assert!(full.node.max_abs_diff(&d.node) < 1e-12);
    }

    #[test]
    fn initial_tensor_is_identity(g in connected_graph(10), width in 1usize..=3, k in 1usize..=2, order in 1usize..=4) {
        let g = g.with_ones_features(width).unwrap();
        let d0 = deriv_init(&g, k, order, None).unwrap();
        prop_assert_eq!(d0.nnz(), g.num_nodes() * width);
        for (v, key, x) in d0.iter() {
            let s = key.slots()[0];
            prop_assert_eq!((key.arity(), s.node, s.order), (1, v, 1));
            let expected: Vec<f64> = (0..width).map(|i| if i == s.feature { 1.0 } else { 0.0 }).collect();
            prop_assert_eq!(x, &expected[..]);
        }
    }
}

#[test]
fn partition_counts() {
    for q in 0..=4 {
        assert_eq!(set_partitions(q).len(), bell(q));
        assert_eq!((0..=q).map(|j| stirling2(q, j)).sum::<usize>(), bell(q));
    }
    assert_eq!([bell(1), bell(2), bell(3), bell(4)], [1, 2, 5, 15]);
}

#[test]
fn cubic_model_counts_triangles() {
    let model = gin_identity_init(3, 1, -1.0);
    let cfg = DerivConfig::new(1, 1).unwrap();
    for seed in 0..20 {
        let g = gen_erdos_renyi(11, 0.35, seed).unwrap();
        let d = compute_all(&model, &g, &cfg).unwrap();
        let trace: f64 = (0..g.num_nodes()).map(|v| d.node.value(v, &DerivKey::single(v, 0, 1), 0)).sum();
        assert!((trace / 6.0 - count_triangles(&g) as f64).abs() < 1e-9);
    }
}
