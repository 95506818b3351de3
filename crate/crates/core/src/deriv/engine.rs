use super::ops::{deriv_activation, deriv_affine, deriv_aggregate, deriv_concat, deriv_init, deriv_pool, Support};
use super::partitions::{PartitionTable, MAX_ORDER};
use super::tensor::DerivTensor;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mpnn::{factorial, ForwardRecord, MpnnModel};

/// Largest graph accepted for pairwise (`k = 2`) tensors.
pub const MAX_PAIR_NODES: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct DerivConfig {
    /// Number of distinct differentiation variables per key (1 or 2).
    pub k: usize,
    /// Largest total derivative order.
    pub max_order: usize,
    pub support: Support,
    /// Input features to differentiate with respect to; all when `None`.
    pub features: Option<Vec<usize>>,
}

impl DerivConfig {
    pub fn new(k: usize, max_order: usize) -> Result<Self> {
        if !(1..=2).contains(&k) {
            return Err(Error::UnsupportedArity(k));
        }
        if max_order > MAX_ORDER {
            return Err(Error::OrderOverflow { requested: max_order, max: MAX_ORDER });
        }
        if max_order == 0 {
            return Err(Error::Validation("derivative order must be at least 1".into()));
        }
        Ok(DerivConfig { k, max_order, support: Support::default(), features: None })
    }

    pub fn with_support(mut self, support: Support) -> Self {
        self.support = support;
        self
    }

    pub fn with_features(mut self, features: Vec<usize>) -> Self {
        self.features = Some(features);
        self
    }
}

#[derive(Clone, Debug)]
pub struct DerivOutput {
    pub record: ForwardRecord,
    /// `D^(0)` through `D^(T)`.
    pub layers: Vec<DerivTensor>,
    /// Derivatives of the final node features (residual concatenation when
    /// the model uses it).
    pub node: DerivTensor,
    /// Derivatives of the readout output, when the model has a readout.
    pub out: Option<DerivTensor>,
}

/// Runs the forward pass and propagates derivative tensors alongside it.
pub fn compute_all(model: &MpnnModel, g: &Graph, cfg: &DerivConfig) -> Result<DerivOutput> {
    if cfg.k == 2 && g.num_nodes() > MAX_PAIR_NODES {
        return Err(Error::Validation(format!("pairwise derivatives are limited to {MAX_PAIR_NODES} nodes, got {}", g.num_nodes())));
    }
    let record = model.forward(g)?;
    let table = PartitionTable::new(cfg.max_order)?;
    let support = cfg.support;
    let mut layers = vec![deriv_init(g, cfg.k, cfg.max_order, cfg.features.as_deref())?];
    for (t, layer) in model.layers.iter().enumerate() {
        let mut d = deriv_aggregate(layers.last().unwrap(), g, &layer.agg, layer.concat, support)?;
        for (l, w) in layer.mlp.weights.iter().enumerate() {
            d = deriv_affine(&d, w, support)?;
            d = deriv_activation(&d, &record.preacts[t][l], layer.mlp.activation_at(l), &table, support)?;
        }
        layers.push(d);
    }
    let node = if model.residual {
        let parts: Vec<(&DerivTensor, f64)> = layers.iter().enumerate().skip(1).map(|(t, d)| (d, 1.0 / factorial(t))).collect();
        deriv_concat(&parts)?
    } else {
        layers.last().unwrap().clone()
    };
    let out = match &model.readout {
        Some(readout) => {
            let mut d = deriv_pool(&node);
            for (l, w) in readout.weights.iter().enumerate() {
                d = deriv_affine(&d, w, support)?;
                d = deriv_activation(&d, &record.readout_preacts[l], readout.activation_at(l), &table, support)?;
            }
            Some(d)
        }
        None => None,
    };
    Ok(DerivOutput { record, layers, node, out })
}
