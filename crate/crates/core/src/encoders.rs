//! Encoders turning sparse derivative tensors into dense node features.
//!
//! The dense encoders gather a fixed block of entries per node (absent
//! entries read as zero) and apply an MLP. The DeepSets encoder instead runs
//! an MLP on every stored entry, tagged with an embedding of its equality
//! pattern, and sum-pools per node; its cost is linear in the entry count.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deriv::{DerivKey, DerivTensor};
use crate::error::{Error, Result};
use crate::mpnn::Mlp;

/// Orbit of `(v, key)` under simultaneous node relabeling: which slots sit
/// on `v`, whether two slots share a node, and the features and orders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatternId(pub u64);

const SLOT_BITS: u32 = 21;

fn pack_slot(on_v: bool, feature: usize, order: usize) -> u64 {
    debug_assert!(feature < 1 << 16 && order < 1 << 4);
    (on_v as u64) << 20 | (feature as u64) << 4 | order as u64
}

fn pack(mut slots: Vec<u64>, same_node: bool) -> PatternId {
    slots.sort_unstable();
    let mut id = 0u64;
    for (i, s) in slots.iter().enumerate() {
        id |= s << (SLOT_BITS * i as u32);
    }
    id |= (slots.len() as u64 - 1) << (2 * SLOT_BITS);
    id |= (same_node as u64) << (2 * SLOT_BITS + 1);
    PatternId(id)
}

pub fn pattern_id(v: usize, key: &DerivKey) -> PatternId {
    let slots = key.slots();
    let packed = slots.iter().map(|s| pack_slot(s.node == v, s.feature, s.order)).collect();
    let same_node = slots.len() == 2 && slots[0].node == slots[1].node;
    pack(packed, same_node)
}

/// Every pattern a tensor with the given arity, order and input width can
/// produce, numbered in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternTable {
    k: usize,
    max_order: usize,
    features: usize,
    index: BTreeMap<PatternId, usize>,
}

impl PatternTable {
    pub fn new(k: usize, max_order: usize, features: usize) -> Self {
        let mut ids = Vec::new();
        for on_v in [false, true] {
            for j in 0..features {
                for a in 1..=max_order {
                    ids.push(pack(vec![pack_slot(on_v, j, a)], false));
                }
            }
        }
        if k >= 2 {
            for (on1, on2, same) in
                [(false, false, false), (true, false, false), (false, true, false), (false, false, true), (true, true, true)]
            {
                for j1 in 0..features {
                    for j2 in 0..features {
                        if same && j1 == j2 {
                            continue;
                        }
                        for a1 in 1..max_order {
                            for a2 in 1..=max_order - a1 {
                                ids.push(pack(vec![pack_slot(on1, j1, a1), pack_slot(on2, j2, a2)], same));
                            }
                        }
                    }
                }
            }
        }
        ids.sort_unstable();
        ids.dedup();
        let index = ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        PatternTable { k, max_order, features, index }
    }

    /// Arity, order and input width the table was built for.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.k, self.max_order, self.features)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index_of(&self, id: PatternId) -> Option<usize> {
        self.index.get(&id).copied()
    }
}

/// Column of `(feature, order, output)` in a gathered block: feature major,
/// order in the middle, output feature minor.
pub fn gather_index(feature: usize, order: usize, i: usize, max_order: usize, width: usize) -> usize {
    ((feature * max_order) + (order - 1)) * width + i
}

/// Per node `v`, the single-variable entries at `v` laid out by
/// [`gather_index`], absent entries as zero.
pub fn gather_diagonal(d: &DerivTensor, features: usize) -> Array2<f64> {
    let (m, w) = (d.max_order(), d.width());
    let mut out = Array2::zeros((d.num_rows(), features * m * w));
    for (v, key, x) in d.iter() {
        let s = key.slots()[0];
        if key.arity() == 1 && s.node == v && s.feature < features {
            for (i, &xi) in x.iter().enumerate() {
                out[[v, gather_index(s.feature, s.order, i, m, w)]] = xi;
            }
        }
    }
    out
}

/// Per source node `u`, the pooled entries with respect to `u`'s features.
pub fn gather_out(d: &DerivTensor, num_nodes: usize, features: usize) -> Result<Array2<f64>> {
    if !d.is_pooled() {
        return Err(Error::Validation("output encoder needs a pooled derivative tensor".into()));
    }
    let (m, w) = (d.max_order(), d.width());
    let mut out = Array2::zeros((num_nodes, features * m * w));
    for (_, key, x) in d.iter() {
        let s = key.slots()[0];
        if key.arity() == 1 && s.node < num_nodes && s.feature < features {
            for (i, &xi) in x.iter().enumerate() {
                out[[s.node, gather_index(s.feature, s.order, i, m, w)]] = xi;
            }
        }
    }
    Ok(out)
}

/// Stored entries flattened for batched per-entry evaluation.
#[derive(Clone, Debug)]
pub struct EntryBatch {
    pub values: Array2<f64>,
    pub nodes: Vec<usize>,
    pub patterns: Vec<usize>,
}

pub fn entry_batch(d: &DerivTensor, table: &PatternTable) -> Result<EntryBatch> {
    let nnz = d.nnz();
    let mut values = Array2::zeros((nnz, d.width()));
    let mut nodes = Vec::with_capacity(nnz);
    let mut patterns = Vec::with_capacity(nnz);
    for (e, (v, key, x)) in d.iter().enumerate() {
        let id =
            table.index_of(pattern_id(v, key)).ok_or_else(|| Error::Validation(format!("pattern of {key:?} at node {v} not in table")))?;
        values.row_mut(e).assign(&ndarray::ArrayView1::from(x));
        nodes.push(v);
        patterns.push(id);
    }
    Ok(EntryBatch { values, nodes, patterns })
}

/// Sums rows of `x` into `num_segments` buckets; rows are visited in order,
/// so the result does not depend on thread scheduling.
pub fn segment_sum(x: &Array2<f64>, segments: &[usize], num_segments: usize) -> Array2<f64> {
    let mut out = Array2::zeros((num_segments, x.ncols()));
    for (row, &s) in x.rows().into_iter().zip(segments) {
        let mut target = out.row_mut(s);
        target += &row;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepSets {
    pub table: PatternTable,
    pub embedding: Array2<f64>,
    /// Applied to `value ⊕ embedding` of every entry.
    pub phi: Mlp,
    /// Applied to the per-node sum.
    pub rho: Mlp,
}

impl DeepSets {
    pub fn encode(&self, d: &DerivTensor) -> Result<Array2<f64>> {
        let batch = entry_batch(d, &self.table)?;
        let emb = self.embedding.select(Axis(0), &batch.patterns);
        let x = concatenate![Axis(1), batch.values, emb];
        let (y, _) = self.phi.forward(&x)?;
        let pooled = segment_sum(&y, &batch.nodes, d.num_rows());
        Ok(self.rho.forward(&pooled)?.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeEncoder {
    /// MLP on the gathered diagonal entries.
    Diagonal(Mlp),
    DeepSets(DeepSets),
}

impl NodeEncoder {
    pub fn encode(&self, d: &DerivTensor, features: usize) -> Result<Array2<f64>> {
        match self {
            NodeEncoder::Diagonal(mlp) => Ok(mlp.forward(&gather_diagonal(d, features))?.0),
            NodeEncoder::DeepSets(ds) => ds.encode(d),
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            NodeEncoder::Diagonal(mlp) => mlp.output_width(),
            NodeEncoder::DeepSets(ds) => ds.rho.output_width(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            NodeEncoder::Diagonal(mlp) => mlp.num_params(),
            NodeEncoder::DeepSets(ds) => ds.embedding.len() + ds.phi.num_params() + ds.rho.num_params(),
        }
    }
}

/// MLP on the gathered output derivatives of each node.
pub fn encode_out(d: &DerivTensor, mlp: &Mlp, num_nodes: usize, features: usize) -> Result<Array2<f64>> {
    Ok(mlp.forward(&gather_out(d, num_nodes, features)?)?.0)
}

/// Shapes for the encoder constructors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Input features differentiated with respect to.
    pub features: usize,
    pub max_order: usize,
    /// Width of the derivative tensor's value vectors.
    pub width: usize,
}

impl EncoderDims {
    pub fn gathered(&self) -> usize {
        self.features * self.max_order * self.width
    }
}

/// A diagonal encoder that passes the gathered entries through unchanged.
pub fn identity_diagonal(dims: EncoderDims) -> NodeEncoder {
    NodeEncoder::Diagonal(Mlp::identity(dims.gathered(), 1, crate::Activation::Identity))
}

#[allow(clippy::too_many_arguments)]
pub fn random_deepsets<R: Rng>(
    dims: EncoderDims,
    k: usize,
    embed: usize,
    hidden: usize,
    out: usize,
    activation: crate::Activation,
    bound: f64,
    rng: &mut R,
) -> DeepSets {
    let table = PatternTable::new(k, dims.max_order, dims.features);
    let embedding = Array2::from_shape_fn((table.len(), embed), |_| rng.gen_range(-bound..=bound));
    let phi = Mlp::random(&[dims.width + embed, hidden], activation, true, bound, rng);
    let rho = Mlp::random(&[hidden, out], activation, false, bound, rng);
    DeepSets { table, embedding, phi, rho }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deriv::Slot;

    #[test]
    fn pattern_examples() {
        assert_eq!(pattern_id(3, &DerivKey::single(3, 0, 1)), pattern_id(7, &DerivKey::single(7, 0, 1)));
        assert_ne!(pattern_id(3, &DerivKey::single(5, 0, 1)), pattern_id(3, &DerivKey::single(3, 0, 1)));
        assert_ne!(pattern_id(3, &DerivKey::single(3, 0, 2)), pattern_id(3, &DerivKey::single(3, 0, 1)));
        let a = DerivKey::new(&[Slot::new(1, 0, 1), Slot::new(4, 0, 2)]).unwrap();
        let b = DerivKey::new(&[Slot::new(9, 0, 2), Slot::new(2, 0, 1)]).unwrap();
        assert_eq!(pattern_id(1, &a), pattern_id(2, &b));
        assert_ne!(pattern_id(4, &a), pattern_id(2, &b));
    }

    #[test]
    fn table_sizes() {
        assert_eq!(PatternTable::new(1, 4, 1).len(), 8);
        assert_eq!(PatternTable::new(1, 2, 3).len(), 12);
        // pairs at order 2 with one feature: {v,u}, {u,w}; same-node pairs need two features
        assert_eq!(PatternTable::new(2, 2, 1).len(), 4 + 2);
    }

    #[test]
    fn gather_layout_round_trip() {
        let mut d = DerivTensor::empty(1, 2, 3, 2);
        d.insert(1, DerivKey::single(1, 1, 2), vec![1.0, 2.0, 3.0]).unwrap();
        d.insert(1, DerivKey::single(0, 0, 1), vec![9.0, 9.0, 9.0]).unwrap();
        let g = gather_diagonal(&d, 2);
        assert_eq!(g.ncols(), 12);
        for i in 0..3 {
            assert_eq!(g[[1, gather_index(1, 2, i, 2, 3)]], (i + 1) as f64);
        }
        assert_eq!(g.sum(), 6.0);
        let mut seen = [false; 12];
        for j in 0..2 {
            for a in 1..=2 {
                for i in 0..3 {
                    let c = gather_index(j, a, i, 2, 3);
                    assert!(!std::mem::replace(&mut seen[c], true));
                }
            }
        }
    }
}
