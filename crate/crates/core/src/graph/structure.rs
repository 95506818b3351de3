//! Combinatorial statistics: random-walk encodings and cycle counts.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use super::Graph;
use crate::error::{Error, Result};

/// Compressed sparse row matrix with explicit values.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.offsets[r]..self.offsets[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(i) => self.values[span.start + i],
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows).map(|r| self.row(r).map(|(c, a)| a * x[c]).sum()).collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for r in 0..self.nrows {
            for (c, a) in self.row(r) {
                out[[r, c]] = a;
            }
        }
        out
    }
}

/// Random-walk matrix with entry `(v, u)` equal to `A[v, u] / deg(u)`, so every
/// column sums to one.
pub fn normalized_adjacency(g: &Graph) -> Result<SparseMatrix> {
    if let Some(v) = g.first_isolated() {
        return Err(Error::IsolatedNode(v));
    }
    let n = g.num_nodes();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(2 * g.num_edges());
    let mut values = Vec::with_capacity(2 * g.num_edges());
    offsets.push(0);
    for v in 0..n {
        for &u in g.neighbors(v) {
            cols.push(u);
            values.push(1.0 / g.degree(u) as f64);
        }
        offsets.push(cols.len());
    }
    Ok(SparseMatrix { nrows: n, ncols: n, offsets, cols, values })
}

/// Column `l - 1` holds the return probabilities `diag(Ã^l)`.
pub fn rwse(g: &Graph, steps: usize) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Validation("random-walk encoding needs at least one step".into()));
    }
    let walk = normalized_adjacency(g)?;
    let n = g.num_nodes();
    let mut out = Array2::zeros((n, steps));
    for v in 0..n {
        let mut x = vec![0.0; n];
        x[v] = 1.0;
        for l in 0..steps {
            x = walk.mul_vec(&x);
            out[[v, l]] = x[v];
        }
    }
    Ok(out)
}

/// Exact triangle count, enumerating each triangle once from its smallest node.
pub fn count_triangles(g: &Graph) -> u64 {
    let mut total = 0;
    for a in 0..g.num_nodes() {
        let higher: Vec<usize> = g.neighbors(a).iter().copied().filter(|&b| b > a).collect();
        for (i, &b) in higher.iter().enumerate() {
            total += higher[i + 1..].iter().filter(|&&c| g.has_edge(b, c)).count() as u64;
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Cycle3,
    Cycle4,
    Cycle5,
    Cycle6,
}

impl Pattern {
    pub fn length(self) -> usize {
        match self {
            Pattern::Cycle3 => 3,
            Pattern::Cycle4 => 4,
            Pattern::Cycle5 => 5,
            Pattern::Cycle6 => 6,
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycle3" | "triangle" => Ok(Pattern::Cycle3),
            "cycle4" => Ok(Pattern::Cycle4),
            "cycle5" => Ok(Pattern::Cycle5),
            "cycle6" => Ok(Pattern::Cycle6),
            other => Err(Error::Validation(format!("unsupported pattern '{other}'"))),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cycle{}", self.length())
    }
}

/// Visits every simple cycle of the given length exactly once. A cycle is
/// rooted at its smallest node and traversed in the direction whose second
/// node is smaller than its last.
fn for_each_cycle(g: &Graph, len: usize, mut visit: impl FnMut(&[usize])) {
    fn extend(g: &Graph, len: usize, path: &mut Vec<usize>, on_path: &mut [bool], visit: &mut dyn FnMut(&[usize])) {
        let root = path[0];
        let last = *path.last().unwrap();
        if path.len() == len {
            if path[1] < last && g.has_edge(last, root) {
                visit(path);
            }
            return;
        }
        for &next in g.neighbors(last) {
            if next > root && !on_path[next] {
                on_path[next] = true;
                path.push(next);
                extend(g, len, path, on_path, visit);
                path.pop();
                on_path[next] = false;
            }
        }
    }
    let mut on_path = vec![false; g.num_nodes()];
    for root in 0..g.num_nodes() {
        let mut path = vec![root];
        on_path[root] = true;
        extend(g, len, &mut path, &mut on_path, &mut visit);
        on_path[root] = false;
    }
}

/// Number of distinct cycles of the pattern's length through each node.
pub fn count_substructure_per_node(g: &Graph, pattern: Pattern) -> Vec<u64> {
    let mut counts = vec![0; g.num_nodes()];
    for_each_cycle(g, pattern.length(), |cycle| {
        for &v in cycle {
            counts[v] += 1;
        }
    });
    counts
}

pub fn count_cycles_total(g: &Graph, pattern: Pattern) -> u64 {
    let mut total = 0;
    for_each_cycle(g, pattern.length(), |_| total += 1);
    total
}

/// Ordered adjacent pairs `(u, v)` joined by no path of length two.
pub fn a_not_a2_pairs(g: &Graph) -> u64 {
    let mut total = 0;
    for (a, b) in g.edges() {
        let (na, nb) = (g.neighbors(a), g.neighbors(b));
        let common = na.iter().any(|w| nb.binary_search(w).is_ok());
        if !common {
            total += 2;
        }
    }
    total
}
