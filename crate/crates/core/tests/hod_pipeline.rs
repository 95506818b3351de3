mod common;

use common::{connected_graph, graph_and_perm, matrix_power};
use hodgnn::deriv::{compute_all, DerivConfig, DerivKey};
use hodgnn::encoders::{gather_index, identity_diagonal, EncoderDims};
use hodgnn::graph::{a_not_a2_pairs, gen_complete, gen_cycle, gen_random_regular, rwse};
use hodgnn::hod::{
    ds_gnn_bag, ds_gnn_oracle, taylor_subgraph_approx, with_marks, BaseInit, HodConfig, HodModel, HodSpec, NodeEncoderKind,
    MAX_PAIR_BAG_NODES,
};
use hodgnn::mpnn::{gin_identity_init, rwse_init, Mlp, MpnnModel, RandomGin};
use hodgnn::verify::invariance_deviation;
use hodgnn::{Activation, Graph};
use ndarray::Array1;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(node_encoder: NodeEncoderKind, graph_level: bool) -> HodSpec {
    HodSpec {
        input_width: 1,
        base_hidden: 2,
        base_depth: 2,
        base_activation: Activation::Tanh,
        base_init: BaseInit::Random { bound: 0.5 },
        residual: false,
        k: 1,
        max_order: 2,
        node_encoder,
        encoder_width: 3,
        use_out: graph_level,
        use_base: true,
        hidden: 4,
        depth: 2,
        activation: Activation::Silu,
        output_width: 1,
        graph_level,
        bound: 0.5,
    }
}

fn max_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn linear_base(depth: usize, eps: f64) -> MpnnModel {
    let mut base = gin_identity_init(depth, 2, eps);
    base.readout = Some(Mlp::identity(2, 1, Activation::Identity));
    base
}

#[test]
fn base_only_config_passes_features_through() {
    let g = gen_random_regular(8, 3, 0).unwrap();
    for max_order in [0, 2] {
        let mut s = spec(NodeEncoderKind::None, true);
        s.use_out = false;
        s.max_order = max_order;
        let model = s.build(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = model.forward(&g).unwrap();
        let base = model.base.forward(&g).unwrap();
        assert_eq!(out.h_der, base.node_out);
        let expected = model.downstream.forward_features(&g, &base.node_out).unwrap().output.unwrap();
        assert_eq!(out.prediction, expected);
        assert!(out.diagnostics.nnz_per_layer.is_empty());
    }
}

#[test]
fn derivative_features_contain_random_walks() {
    let mut graphs = vec![gen_cycle(4).unwrap(), gen_cycle(6).unwrap(), gen_complete(3).unwrap(), gen_complete(4).unwrap()];
    graphs.extend((0..3).map(|s| gen_random_regular(10, 3, s).unwrap()));
    for steps in 1..=6 {
        let base = rwse_init(steps, steps).unwrap();
        let dims = EncoderDims { features: steps, max_order: 1, width: steps };
        let h_width = steps + dims.gathered();
        let downstream = RandomGin {
            input_width: h_width,
            hidden: 2,
            depth: 1,
            activation: Activation::Tanh,
            concat: false,
            residual: false,
            readout: Some(1),
            bound: 0.5,
        }
        .sample(&mut ChaCha8Rng::seed_from_u64(steps as u64));
        let model = HodModel {
            base,
            node_encoder: Some(identity_diagonal(dims)),
            out_encoder: None,
            downstream,
            config: HodConfig { k: 1, max_order: 1, use_base: true, use_out: false, features: None },
        };
        model.validate().unwrap();
        for g in &graphs {
            let g = g.clone().with_ones_features(steps).unwrap();
            let h = model.forward(&g).unwrap().h_der;
            let expected = rwse(&g, steps).unwrap();
            for c in 0..steps {
                let col = steps + gather_index(c, 1, c, 1, steps);
                for v in 0..g.num_nodes() {
                    assert!((h[[v, col]] - expected[[v, c]]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn zero_mark_is_unmarked_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = RandomGin {
        input_width: 2,
        hidden: 3,
        depth: 2,
        activation: Activation::Tanh,
        concat: false,
        residual: false,
        readout: Some(2),
        bound: 0.5,
    }
    .sample(&mut rng);
    let g = gen_random_regular(8, 3, 5).unwrap();
    let zero_channel = with_marks(&g, &[(0, 0.0)]).unwrap();
    let unmarked = base.forward(&zero_channel).unwrap().graph_output().unwrap();
    for v in 0..8 {
        assert!(max_diff(&ds_gnn_oracle(&base, &g, v, 0.0).unwrap(), &unmarked) < 1e-15);
        assert!(max_diff(&taylor_subgraph_approx(&base, &g, v, 0.0, 3).unwrap(), &unmarked) < 1e-15);
    }
}

#[test]
fn symmetric_nodes_give_equal_marked_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = RandomGin {
        input_width: 2,
        hidden: 3,
        depth: 3,
        activation: Activation::Sin,
        concat: true,
        residual: false,
        readout: Some(1),
        bound: 0.5,
    }
    .sample(&mut rng);
    let g = gen_cycle(4).unwrap();
    let bag = ds_gnn_bag(&base, &g, 1, 0.7).unwrap();
    assert!(bag.iter().all(|o| max_diff(o, &bag[0]) < 1e-12));
    let pair_base = RandomGin {
        input_width: 3,
        hidden: 3,
        depth: 3,
        activation: Activation::Sin,
        concat: true,
        residual: false,
        readout: Some(1),
        bound: 0.5,
    }
    .sample(&mut rng);
    let pairs = ds_gnn_bag(&pair_base, &g, 2, 0.7).unwrap();
    assert_eq!(pairs.len(), 16);
    // adjacent pairs agree with each other but not with opposite pairs
    assert!(max_diff(&pairs[1], &pairs[4 + 2]) < 1e-12);
    assert!(max_diff(&pairs[1], &pairs[2]) > 1e-9);
    let big = gen_cycle(MAX_PAIR_BAG_NODES + 1).unwrap();
    assert!(ds_gnn_bag(&pair_base, &big, 2, 0.7).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_marking_matches_column_sums(g in connected_graph(9), depth in 1usize..=3, eps in -1.0f64..1.0, mark in -2.0f64..2.0) {
        let base = linear_base(depth, eps);
        let shifted = g.dense_adjacency() + ndarray::Array2::<f64>::eye(g.num_nodes()) * (1.0 + eps);
        let walk = matrix_power(&shifted, depth);
        let col_sums = walk.sum_axis(ndarray::Axis(0));
        for v in 0..g.num_nodes() {
            let oracle = ds_gnn_oracle(&base, &g, v, mark).unwrap();
            prop_assert!((oracle[0] - col_sums.sum()).abs() < 1e-9);
            prop_assert!((oracle[1] - mark * col_sums[v]).abs() < 1e-9);
            let first = taylor_subgraph_approx(&base, &g, v, mark, 1).unwrap();
            prop_assert!(max_diff(&first, &oracle) < 1e-9);
        }
    }

    #[test]
    fn pipeline_is_permutation_symmetric((g, perm) in graph_and_perm(9), seed in any::<u16>(), kind in prop_oneof![Just(NodeEncoderKind::Diagonal), Just(NodeEncoderKind::Deepsets)], graph_level in any::<bool>(), k in 1usize..=2) {
        let mut s = spec(kind, graph_level);
        s.k = k;
        if k == 2 && kind == NodeEncoderKind::Diagonal {
            s.node_encoder = NodeEncoderKind::Deepsets;
        }
        let model = s.build(&mut ChaCha8Rng::seed_from_u64(seed as u64)).unwrap();
        let report = invariance_deviation(&model, &g, &perm).unwrap();
        prop_assert!(report.prediction < 1e-10 && report.h_der < 1e-10, "{:?}", report);
    }

    #[test]
    fn derivative_pattern_counts_open_pairs(g in connected_graph(10)) {
        prop_assert_eq!(open_pair_statistic(&g), a_not_a2_pairs(&g) as f64);
    }
}

/// Per node, the neighbors reached in one step but not in two, read off the
/// first-order derivatives of `[A x, A^2 x / 2]`.
fn open_pair_statistic(g: &Graph) -> f64 {
    let mut base = gin_identity_init(2, 1, -1.0);
    base.residual = true;
    let d = compute_all(&base, g, &DerivConfig::new(1, 1).unwrap()).unwrap();
    let mut total = 0.0;
    for v in 0..g.num_nodes() {
        for u in (0..g.num_nodes()).filter(|&u| u != v) {
            if let Some(x) = d.node.get(v, &DerivKey::single(u, 0, 1)) {
                if x[0] == 1.0 && x[1] == 0.0 {
                    total += 1.0;
                }
            }
        }
    }
    total
}

#[test]
fn derivative_pattern_separates_square_from_triangle() {
    let square = open_pair_statistic(&gen_cycle(4).unwrap());
    let triangle = open_pair_statistic(&gen_complete(3).unwrap());
    assert_eq!((square, triangle), (8.0, 0.0));
}

#[test]
fn model_json_round_trip_preserves_outputs() {
    let g = gen_random_regular(8, 3, 3).unwrap();
    for kind in [NodeEncoderKind::Diagonal, NodeEncoderKind::Deepsets] {
        let model = spec(kind, true).build(&mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let text = serde_json::to_string(&model).unwrap();
        let back: HodModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back.forward(&g).unwrap().prediction, model.forward(&g).unwrap().prediction);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value.get("encoders").is_some());
    }
}

#[test]
fn pairwise_pipeline_limits_graph_size() {
    let mut s = spec(NodeEncoderKind::Deepsets, true);
    s.k = 2;
    let model = s.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(model.forward(&gen_cycle(31).unwrap()).is_err());
    assert!(model.forward(&gen_cycle(12).unwrap()).is_ok());
}
