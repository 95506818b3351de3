//! Sparse high-order derivative tensors of message-passing networks.
//!
//! `D^(t)[v, K, i]` is the partial derivative of feature `i` of node `v` after
//! layer `t` with respect to the input features named by the multi-index `K`.
//! Entries are only stored where the receptive field allows a nonzero value,
//! and every forward step has a matching propagation step in [`ops`].

mod engine;
mod key;
pub mod ops;
mod partitions;
mod tensor;

pub use engine::{compute_all, DerivConfig, DerivOutput, MAX_PAIR_NODES};
pub use key::{DerivKey, Slot};
pub use ops::{deriv_activation, deriv_affine, deriv_aggregate, deriv_concat, deriv_init, deriv_pool, Support, PRUNE_TOL};
pub use partitions::{bell, set_partitions, stirling2, BlockGroup, PartitionTable, MAX_ORDER};
pub use tensor::{DerivTensor, Row, SparsityStats};

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};

    use super::*;
    use crate::activation::Activation;
    use crate::graph::{gen_complete, gen_cycle, Graph};
    use crate::mpnn::{gin_identity_init, Aggregation};

    #[test]
    fn init_is_identity_on_diagonal() {
        let g = gen_cycle(5).unwrap();
        let d = deriv_init(&g, 1, 2, None).unwrap();
        assert_eq!(d.nnz(), 5);
        for v in 0..5 {
            assert_eq!(d.get(v, &DerivKey::single(v, 0, 1)), Some(&[1.0][..]));
            assert_eq!(d.get(v, &DerivKey::single((v + 1) % 5, 0, 1)), None);
        }
        let g2 = g.with_ones_features(2).unwrap();
        assert_eq!(deriv_init(&g2, 1, 2, None).unwrap().nnz(), 10);
    }

    #[test]
    fn aggregate_examples() {
        let p2 = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let d = deriv_init(&p2, 1, 1, None).unwrap();
        let out = deriv_aggregate(&d, &p2, &Aggregation::Gin { eps: -1.0 }, false, Support::default()).unwrap();
        assert_eq!(out.nnz(), 2);
        assert_eq!(out.get(0, &DerivKey::single(1, 0, 1)), Some(&[1.0][..]));
        assert_eq!(out.get(1, &DerivKey::single(0, 0, 1)), Some(&[1.0][..]));

        let k3 = gen_complete(3).unwrap();
        let d = deriv_init(&k3, 1, 1, None).unwrap();
        let out = deriv_aggregate(&d, &k3, &Aggregation::Gin { eps: 0.0 }, false, Support::default()).unwrap();
        assert_eq!(out.stats().per_node, vec![3, 3, 3]);
        assert!(out.iter().all(|(_, _, x)| x == [1.0]));

        let concat = deriv_aggregate(&d, &k3, &Aggregation::Gin { eps: -1.0 }, true, Support::default()).unwrap();
        assert_eq!(concat.width(), 2);
        assert_eq!(concat.get(0, &DerivKey::single(0, 0, 1)), Some(&[1.0, 0.0][..]));
        assert_eq!(concat.get(0, &DerivKey::single(1, 0, 1)), Some(&[0.0, 1.0][..]));
    }

    #[test]
    fn affine_examples() {
        let mut d = DerivTensor::empty(1, 1, 2, 1);
        d.insert(0, DerivKey::single(0, 0, 1), vec![2.0, 3.0]).unwrap();
        let same = deriv_affine(&d, &Array2::eye(2), Support::default()).unwrap();
        assert_eq!(same, d);
        assert!(deriv_affine(&d, &Array2::zeros((2, 2)), Support::default()).unwrap().is_empty());
        let summed = deriv_affine(&d, &array![[1.0, 1.0]], Support::default()).unwrap();
        assert_eq!(summed.get(0, &DerivKey::single(0, 0, 1)), Some(&[5.0][..]));
        assert!(deriv_affine(&d, &Array2::eye(3), Support::default()).is_err());
    }

    #[test]
    fn exp_second_order_identity() {
        // d²/dx² exp(y(x)) = exp(y) (y'' + y'^2)
        let (a, b, y) = (0.7, -0.3, 0.4);
        let mut d = DerivTensor::empty(1, 2, 1, 1);
        d.insert(0, DerivKey::single(0, 0, 1), vec![a]).unwrap();
        d.insert(0, DerivKey::single(0, 0, 2), vec![b]).unwrap();
        let table = PartitionTable::new(2).unwrap();
        let out = deriv_activation(&d, &array![[y]], Activation::Exp, &table, Support::default()).unwrap();
        let first = out.value(0, &DerivKey::single(0, 0, 1), 0);
        let second = out.value(0, &DerivKey::single(0, 0, 2), 0);
        assert!((first - y.exp() * a).abs() < 1e-15);
        assert!((second - y.exp() * (b + a * a)).abs() < 1e-15);
    }

    #[test]
    fn pair_keys_appear_through_products() {
        let mut d = DerivTensor::empty(2, 2, 1, 1);
        d.insert(0, DerivKey::single(0, 0, 1), vec![2.0]).unwrap();
        d.insert(0, DerivKey::single(1, 0, 1), vec![3.0]).unwrap();
        let table = PartitionTable::new(2).unwrap();
        let out = deriv_activation(&d, &array![[0.0]], Activation::Exp, &table, Support::default()).unwrap();
        let pair = out.lookup(0, &[Slot::new(1, 0, 1), Slot::new(0, 0, 1)]).unwrap().unwrap();
        assert!((pair[0] - 6.0).abs() < 1e-15);
        assert_eq!(out.nnz(), 5);
    }

    #[test]
    fn triangle_diagonal_on_k3() {
        let g = gen_complete(3).unwrap();
        let out = compute_all(&gin_identity_init(3, 1, -1.0), &g, &DerivConfig::new(1, 1).unwrap()).unwrap();
        for v in 0..3 {
            assert!((out.node.value(v, &DerivKey::single(v, 0, 1), 0) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_empty_tensors() {
        let g = gen_cycle(5).unwrap();
        let mut model = gin_identity_init(2, 1, 0.0);
        for layer in &mut model.layers {
            for w in &mut layer.mlp.weights {
                w.fill(0.0);
            }
            layer.mlp.activation = Activation::Tanh;
        }
        let out = compute_all(&model, &g, &DerivConfig::new(1, 3).unwrap()).unwrap();
        assert!(out.layers[1..].iter().all(DerivTensor::is_empty));
    }

    #[test]
    fn config_limits() {
        assert!(matches!(DerivConfig::new(3, 2), Err(crate::Error::UnsupportedArity(3))));
        assert!(matches!(DerivConfig::new(1, 5), Err(crate::Error::OrderOverflow { .. })));
        let big = gen_cycle(31).unwrap();
        assert!(compute_all(&gin_identity_init(1, 1, 0.0), &big, &DerivConfig::new(2, 1).unwrap()).is_err());
    }
}
