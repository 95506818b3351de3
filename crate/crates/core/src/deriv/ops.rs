//! Propagation steps for derivative tensors. Each mirrors one step of the
//! forward pass: aggregation, affine map, pointwise activation, pooling.

use std::collections::BTreeSet;

use ndarray::Array2;
use rayon::prelude::*;

use super::key::DerivKey;
use super::partitions::PartitionTable;
use super::tensor::{DerivTensor, Row};
use crate::activation::{Activation, MAX_ACT_ORDER};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mpnn::Aggregation;

/// Entries smaller than this in every component are dropped under
/// [`Support::Magnitude`].
pub const PRUNE_TOL: f64 = 1e-14;

/// Which entries a step keeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Support {
    /// Drop entries whose max-abs falls below the threshold.
    Magnitude(f64),
    /// Keep every entry the sparsity pattern allows, even exact zeros, so
    /// that the set of keys does not depend on parameter values.
    Structural,
}

impl Default for Support {
    fn default() -> Self {
        Support::Magnitude(PRUNE_TOL)
    }
}

fn finish(mut t: DerivTensor, support: Support) -> DerivTensor {
    if let Support::Magnitude(tol) = support {
        t.prune(tol);
    }
    t
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Seeds `D^(0)`: the derivative of `X[v, i]` with respect to `X[v, j]` is
/// `[i == j]`. `features` restricts the differentiation variables.
pub fn deriv_init(g: &Graph, k: usize, max_order: usize, features: Option<&[usize]>) -> Result<DerivTensor> {
    let width = g.feature_width();
    let all: Vec<usize> = (0..width).collect();
    let features = features.unwrap_or(&all);
    if let Some(&j) = features.iter().find(|&&j| j >= width) {
        return Err(Error::Validation(format!("feature {j} out of range for width {width}")));
    }
    let mut t = DerivTensor::empty(k, max_order, width, g.num_nodes());
    for v in 0..g.num_nodes() {
        for &j in features {
            let mut e = vec![0.0; width];
            e[j] = 1.0;
            t.rows[v].insert(DerivKey::single(v, j, 1), e);
        }
    }
    Ok(t)
}

/// Applies the aggregation linearly to every entry. With `concat` the node's
/// own entries occupy the first half of the output width.
pub fn deriv_aggregate(d: &DerivTensor, g: &Graph, agg: &Aggregation, concat: bool, support: Support) -> Result<DerivTensor> {
    if d.pooled || d.num_rows() != g.num_nodes() {
        return Err(Error::width("derivative rows", g.num_nodes(), d.num_rows()));
    }
    agg.check(g)?;
    let w = d.width;
    let (width, offset) = if concat { (2 * w, w) } else { (w, 0) };
    let self_coef = agg.self_coef();
    let keep_self = self_coef != 0.0 || (support == Support::Structural && matches!(agg, Aggregation::Gin { .. }));
    let rows: Vec<Row> = (0..g.num_nodes())
        .into_par_iter()
        .map(|v| {
            let mut row = Row::new();
            if concat {
                for (key, x) in &d.rows[v] {
                    let mut y = vec![0.0; width];
                    y[..w].copy_from_slice(x);
                    row.insert(*key, y);
                }
            }
            if keep_self {
                for (key, x) in &d.rows[v] {
                    let y = row.entry(*key).or_insert_with(|| vec![0.0; width]);
                    add_scaled(&mut y[offset..], x, self_coef);
                }
            }
            let b = agg.neighbor_coef(g, v);
            for &u in g.neighbors(v) {
                for (key, x) in &d.rows[u] {
                    let y = row.entry(*key).or_insert_with(|| vec![0.0; width]);
                    add_scaled(&mut y[offset..], x, b);
                }
            }
            row
        })
        .collect();
    Ok(finish(DerivTensor { rows, ..d.like(width) }, support))
}

/// Left-multiplies every entry by `weight`; the bias has no derivative.
pub fn deriv_affine(d: &DerivTensor, weight: &Array2<f64>, support: Support) -> Result<DerivTensor> {
    if weight.ncols() != d.width {
        return Err(Error::width("affine input", weight.ncols(), d.width));
    }
    let rows: Vec<Row> = d
        .rows
        .par_iter()
        .map(|row| {
            row.iter()
                .map(|(key, x)| {
                    let y = weight.rows().into_iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
                    (*key, y)
                })
                .collect()
        })
        .collect();
    Ok(finish(DerivTensor { rows, ..d.like(weight.nrows()) }, support))
}

/// Keys reachable as sums of present keys within the arity and order limits.
pub(crate) fn candidate_keys(row: &Row, k: usize, max_order: usize) -> Vec<DerivKey> {
    let present: Vec<DerivKey> = row.keys().copied().collect();
    let mut all: BTreeSet<DerivKey> = present.iter().copied().collect();
    let mut frontier: Vec<DerivKey> = present.clone();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for a in &frontier {
            let room = max_order - a.total_order();
            for p in present.iter().filter(|p| p.total_order() <= room) {
                if let Some(c) = a.combine(p, k) {
                    if all.insert(c) {
                        next.push(c);
                    }
                }
            }
        }
        frontier = next;
    }
    all.into_iter().collect()
}

/// Calls `f(count, blocks, factors)` for every block group of `key` whose
/// factor entries are all present in `row`.
pub(crate) fn for_each_term<'a>(row: &'a Row, key: &DerivKey, table: &PartitionTable, mut f: impl FnMut(f64, &[DerivKey], &[&'a [f64]])) {
    let mut subkeys: Vec<DerivKey> = Vec::with_capacity(4);
    let mut factors: Vec<&[f64]> = Vec::with_capacity(4);
    'groups: for group in table.groups(key.shape()) {
        subkeys.clear();
        factors.clear();
        for &(b1, b2) in &group.blocks {
            let sub = key.restrict(b1, b2).expect("blocks are nonempty");
            match row.get(&sub) {
                Some(x) => {
                    subkeys.push(sub);
                    factors.push(x.as_slice());
                }
                None => continue 'groups,
            }
        }
        f(group.count, &subkeys, &factors);
    }
}

/// Activation derivatives `sigma^(j)(y)` for `j <= orders`, laid out `[i][j]`.
pub(crate) fn activation_table(act: Activation, y: ndarray::ArrayView1<f64>, orders: usize) -> Vec<[f64; MAX_ACT_ORDER + 1]> {
    y.iter()
        .map(|&x| {
            let mut out = [0.0; MAX_ACT_ORDER + 1];
            act.derivs(x, &mut out[..=orders]);
            out
        })
        .collect()
}

/// Multivariate chain rule through a pointwise activation:
/// `D[K]_i = sum over partitions of sigma^(|pi|)(y_i) * prod_B D_lin[K_B]_i`.
pub fn deriv_activation(
    d: &DerivTensor,
    preact: &Array2<f64>,
    act: Activation,
    table: &PartitionTable,
    support: Support,
) -> Result<DerivTensor> {
    if preact.nrows() != d.num_rows() || preact.ncols() != d.width {
        return Err(Error::width("activation pre-activation width", d.width, preact.ncols()));
    }
    if table.max_order() < d.max_order {
        return Err(Error::OrderOverflow { requested: d.max_order, max: table.max_order() });
    }
    if act == Activation::Identity {
        return Ok(d.clone());
    }
    let width = d.width;
    let rows: Vec<Row> = d
        .rows
        .par_iter()
        .enumerate()
        .map(|(v, row)| {
            let sig = activation_table(act, preact.row(v), d.max_order);
            let mut out = Row::new();
            for key in candidate_keys(row, d.k, d.max_order) {
                let mut y = vec![0.0; width];
                for_each_term(row, &key, table, |count, _, factors| {
                    let n = factors.len();
                    for (i, yi) in y.iter_mut().enumerate() {
                        let prod: f64 = factors.iter().map(|x| x[i]).product();
                        *yi += count * sig[i][n] * prod;
                    }
                });
                out.insert(key, y);
            }
            out
        })
        .collect();
    Ok(finish(DerivTensor { rows, ..d.like(width) }, support))
}

/// Sums entries over nodes into a single pooled row.
pub fn deriv_pool(d: &DerivTensor) -> DerivTensor {
    let mut out = DerivTensor::empty_pooled(d.k, d.max_order, d.width);
    for row in &d.rows {
        for (key, x) in row {
            let y = out.rows[0].entry(*key).or_insert_with(|| vec![0.0; d.width]);
            add_scaled(y, x, 1.0);
        }
    }
    out
}

/// Concatenates tensors along the output width, scaling each block.
pub fn deriv_concat(parts: &[(&DerivTensor, f64)]) -> Result<DerivTensor> {
    let first = parts.first().ok_or_else(|| Error::Validation("nothing to concatenate".into()))?.0;
    if parts.iter().any(|(p, _)| p.num_rows() != first.num_rows() || p.pooled != first.pooled) {
        return Err(Error::Validation("concatenated tensors disagree on rows".into()));
    }
    let width = parts.iter().map(|(p, _)| p.width).sum();
    let mut out = first.like(width);
    let mut offset = 0;
    for (p, scale) in parts {
        for (v, row) in p.rows.iter().enumerate() {
            for (key, x) in row {
                let y = out.rows[v].entry(*key).or_insert_with(|| vec![0.0; width]);
                add_scaled(&mut y[offset..offset + p.width], x, *scale);
            }
        }
        offset += p.width;
    }
    Ok(out)
}
