use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::key::{DerivKey, Slot};
use crate::error::{Error, Result};

pub type Row = BTreeMap<DerivKey, Vec<f64>>;

/// Sparse derivative tensor: per node (or a single pooled row), a map from
/// canonical key to the dense vector over output features.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivTensor {
    pub(crate) k: usize,
    pub(crate) max_order: usize,
    pub(crate) width: usize,
    pub(crate) pooled: bool,
    pub(crate) rows: Vec<Row>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SparsityStats {
    pub per_node: Vec<usize>,
    pub max: usize,
    pub total: usize,
}

#[derive(Serialize)]
struct DumpLine<'a> {
    v: Option<usize>,
    sources: Vec<[usize; 2]>,
    alpha: Vec<usize>,
    values: &'a [f64],
}

impl DerivTensor {
    pub fn empty(k: usize, max_order: usize, width: usize, num_rows: usize) -> Self {
        DerivTensor { k, max_order, width, pooled: false, rows: vec![Row::new(); num_rows] }
    }

    pub fn empty_pooled(k: usize, max_order: usize, width: usize) -> Self {
        DerivTensor { k, max_order, width, pooled: true, rows: vec![Row::new()] }
    }

    /// Same metadata, no entries, possibly a different width.
    pub(crate) fn like(&self, width: usize) -> Self {
        DerivTensor { width, rows: vec![Row::new(); self.rows.len()], ..*self }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_pooled(&self) -> bool {
        self.pooled
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, v: usize) -> &Row {
        &self.rows[v]
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn get(&self, v: usize, key: &DerivKey) -> Option<&[f64]> {
        self.rows[v].get(key).map(Vec::as_slice)
    }

    /// Looks up an entry from slots listed in any order.
    pub fn lookup(&self, v: usize, slots: &[Slot]) -> Result<Option<&[f64]>> {
        Ok(self.get(v, &DerivKey::new(slots)?))
    }

    /// Value at output feature `i`, zero when absent.
    pub fn value(&self, v: usize, key: &DerivKey, i: usize) -> f64 {
        self.get(v, key).map_or(0.0, |x| x[i])
    }

    pub fn insert(&mut self, v: usize, key: DerivKey, values: Vec<f64>) -> Result<()> {
        if values.len() != self.width {
            return Err(Error::width("derivative entry", self.width, values.len()));
        }
        if key.arity() > self.k || key.total_order() > self.max_order {
            return Err(Error::Validation(format!("key {key:?} outside k={} m={}", self.k, self.max_order)));
        }
        self.rows[v].insert(key, values);
        Ok(())
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.nnz() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &DerivKey, &[f64])> {
        self.rows.iter().enumerate().flat_map(|(v, r)| r.iter().map(move |(k, x)| (v, k, x.as_slice())))
    }

    pub fn stats(&self) -> SparsityStats {
        let per_node: Vec<usize> = self.rows.iter().map(|r| r.len()).collect();
        SparsityStats { max: per_node.iter().copied().max().unwrap_or(0), total: per_node.iter().sum(), per_node }
    }

    /// Drops entries whose largest magnitude is below `tol`.
    pub fn prune(&mut self, tol: f64) {
        for row in &mut self.rows {
            row.retain(|_, x| x.iter().any(|a| a.abs() >= tol));
        }
    }

    /// Relabels nodes in both the row index and the keys.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let mut out = self.like(self.width);
        for (v, row) in self.rows.iter().enumerate() {
            let target = if self.pooled { 0 } else { perm[v] };
            for (key, x) in row {
                out.rows[target].insert(key.relabeled(perm), x.clone());
            }
        }
        out
    }

    /// Largest absolute difference over the union of keys, absent as zero.
    pub fn max_abs_diff(&self, other: &DerivTensor) -> f64 {
        let mut worst: f64 = if self.width == other.width && self.rows.len() == other.rows.len() { 0.0 } else { f64::INFINITY };
        for (a, b) in [(self, other), (other, self)] {
            for (v, key, x) in a.iter() {
                let y = b.rows.get(v).and_then(|r| r.get(key));
                for (i, xi) in x.iter().enumerate() {
                    let yi = y.and_then(|y| y.get(i)).copied().unwrap_or(0.0);
                    worst = worst.max((xi - yi).abs());
                }
            }
        }
        worst
    }

    /// One JSON object per entry in canonical order.
    pub fn write_json_lines<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for (v, key, values) in self.iter() {
            let line = DumpLine {
                v: (!self.pooled).then_some(v),
                sources: key.slots().iter().map(|s| [s.node, s.feature]).collect(),
                alpha: key.slots().iter().map(|s| s.order).collect(),
                values,
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_lookup_and_stats() {
        let mut t = DerivTensor::empty(2, 3, 2, 3);
        t.insert(0, DerivKey::single(0, 0, 1), vec![1.0, 0.0]).unwrap();
        let pair = DerivKey::new(&[Slot::new(2, 0, 1), Slot::new(1, 0, 1)]).unwrap();
        t.insert(1, pair, vec![0.5, 0.5]).unwrap();
        assert!(t.insert(1, pair, vec![0.5]).is_err());
        assert!(t.insert(1, DerivKey::single(0, 0, 4), vec![0.0, 0.0]).is_err());
        let a = t.lookup(1, &[Slot::new(1, 0, 1), Slot::new(2, 0, 1)]).unwrap();
        let b = t.lookup(1, &[Slot::new(2, 0, 1), Slot::new(1, 0, 1)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(t.stats(), SparsityStats { per_node: vec![1, 1, 0], max: 1, total: 2 });
        assert_eq!(DerivTensor::empty(1, 1, 1, 4).stats().total, 0);
    }

    #[test]
    fn prune_and_dump() {
        let mut t = DerivTensor::empty(1, 2, 1, 2);
        t.insert(0, DerivKey::single(1, 0, 1), vec![1e-15]).unwrap();
        t.insert(1, DerivKey::single(1, 0, 2), vec![2.0]).unwrap();
        t.prune(1e-14);
        assert_eq!(t.nnz(), 1);
        let mut buf = Vec::new();
        t.write_json_lines(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"v\":1,\"sources\":[[1,0]],\"alpha\":[2],\"values\":[2.0]}\n");
    }
}
