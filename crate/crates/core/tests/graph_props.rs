mod common;

use common::{brute_cycles_per_node, connected_graph, graph_and_perm, matrix_power};
use hodgnn::graph::{
    a_not_a2_pairs, count_cycles_total, count_substructure_per_node, count_triangles, gen_random_regular, load_graph_json,
    normalized_adjacency, rwse, save_graph_json, Pattern,
};
use ndarray::Array2;
use proptest::prelude::*;

const PATTERNS: [Pattern; 4] = [Pattern::Cycle3, Pattern::Cycle4, Pattern::Cycle5, Pattern::Cycle6];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triangles_match_trace_of_cube(g in connected_graph(10)) {
        let a = g.dense_adjacency();
        let trace: f64 = matrix_power(&a, 3).diag().sum();
        prop_assert_eq!(count_triangles(&g), (trace / 6.0).round() as u64);
        prop_assert_eq!(count_cycles_total(&g, Pattern::Cycle3), count_triangles(&g));
    }

    #[test]
    fn cycle_counts_match_brute_force(g in connected_graph(8)) {
        for p in PATTERNS {
            let per_node = count_substructure_per_node(&g, p);
            prop_assert_eq!(&per_node, &brute_cycles_per_node(&g, p.length()));
            prop_assert_eq!(per_node.iter().sum::<u64>(), count_cycles_total(&g, p) * p.length() as u64);
        }
    }

    #[test]
    fn counts_follow_relabeling((g, perm) in graph_and_perm(9)) {
        let h = g.permuted(&perm).unwrap();
        prop_assert_eq!(count_triangles(&h), count_triangles(&g));
        prop_assert_eq!(a_not_a2_pairs(&h), a_not_a2_pairs(&g));
        for p in PATTERNS {
            let before = count_substructure_per_node(&g, p);
            let after = count_substructure_per_node(&h, p);
            for v in 0..g.num_nodes() {
                prop_assert_eq!(after[perm[v]], before[v]);
            }
        }
    }

    #[test]
    fn a_not_a2_matches_dense(g in connected_graph(10)) {
        let a = g.dense_adjacency();
        let a2 = a.dot(&a);
        let expected = a.indexed_iter().filter(|&((i, j), &x)| x == 1.0 && a2[[i, j]] == 0.0).count() as u64;
        prop_assert_eq!(a_not_a2_pairs(&g), expected);
    }

    #[test]
    fn rwse_matches_dense_powers(g in connected_graph(9), steps in 1usize..=6) {
        let a = g.dense_adjacency();
        let deg = a.sum_axis(ndarray::Axis(0));
        let walk = Array2::from_shape_fn(a.dim(), |(i, j)| a[[i, j]] / deg[j]);
        let enc = rwse(&g, steps).unwrap();
        prop_assert_eq!(enc.dim(), (g.num_nodes(), steps));
        for s in 1..=steps {
            let p = matrix_power(&walk, s);
            for v in 0..g.num_nodes() {
                prop_assert!((enc[[v, s - 1]] - p[[v, v]]).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&enc[[v, s - 1]]));
            }
        }
    }

    #[test]
    fn normalized_adjacency_columns_sum_to_one(g in connected_graph(10)) {
        let dense = normalized_adjacency(&g).unwrap().to_dense();
        for col in dense.columns() {
            prop_assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip(g in connected_graph(10)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        save_graph_json(&g, &path).unwrap();
        let back = load_graph_json(&path).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn permutation_is_a_relabeling((g, perm) in graph_and_perm(10)) {
        let h = g.permuted(&perm).unwrap();
        h.check_invariants().unwrap();
        prop_assert_eq!(h.num_edges(), g.num_edges());
        for (a, b) in g.edges() {
            prop_assert!(h.has_edge(perm[a], perm[b]));
        }
    }
}

#[test]
fn regular_graphs_have_uniform_rwse() {
    for seed in 0..5 {
        let g = gen_random_regular(10, 3, seed).unwrap();
        let enc = rwse(&g, 4).unwrap();
        for row in enc.rows() {
            assert_eq!(row[0], 0.0);
            assert!((row[1] - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}
