//! Immutable undirected graphs in compressed sparse row form.
//!
//! A [`Graph`] couples a symmetric, loop-free adjacency structure with a dense
//! node feature matrix and optional regression/classification labels. Every
//! constructor validates the CSR invariants, so downstream code can rely on
//! sorted, duplicate-free neighbor lists.

mod generate;
mod io;
mod structure;

pub use generate::{
    gen_bounded_degree, gen_complete, gen_counting_dataset, gen_cycle, gen_erdos_renyi, gen_path, gen_random_regular, gen_star,
};
pub use io::{load_dataset, load_graph_json, save_dataset, save_graph_json, Dataset, GraphFile, Split, Task};
pub(crate) use io::{parse_json_file, write_string};
pub use structure::{
    a_not_a2_pairs, count_cycles_total, count_substructure_per_node, count_triangles, normalized_adjacency, rwse, Pattern, SparseMatrix,
};

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Array2<f64>,
    node_labels: Option<Vec<f64>>,
    graph_label: Option<Vec<f64>>,
}

impl Graph {
    /// Builds a graph from undirected edges listed once each, with all-ones
    /// features of width 1.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Validation(format!("edge ({a}, {b}) out of range for {num_nodes} nodes")));
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop at node {a}")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut neighbors = Vec::with_capacity(2 * edges.len());
        offsets.push(0);
        for (v, list) in adj.iter_mut().enumerate() {
            list.sort_unstable();
            if let Some(w) = list.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Validation(format!("duplicate edge ({v}, {})", w[0])));
            }
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        let g = Graph { offsets, neighbors, features: Array2::ones((num_nodes, 1)), node_labels: None, graph_label: None };
        debug_assert!(g.check_invariants().is_ok());
        Ok(g)
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.num_nodes() {
            return Err(Error::width("node feature rows", self.num_nodes(), features.nrows()));
        }
        if features.ncols() == 0 {
            return Err(Error::Validation("node features need at least one column".into()));
        }
        self.features = features;
        Ok(self)
    }

    pub fn with_node_labels(mut self, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != self.num_nodes() {
            return Err(Error::width("node labels", self.num_nodes(), labels.len()));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn with_graph_label(mut self, label: Vec<f64>) -> Self {
        self.graph_label = Some(label);
        self
    }

    /// Replaces the features by the all-ones matrix of the given width.
    pub fn with_ones_features(self, width: usize) -> Result<Self> {
        let n = self.num_nodes();
        self.with_features(Array2::ones((n, width)))
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.num_nodes()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// Each undirected edge once, as `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes()).flat_map(|a| self.neighbors(a).iter().filter(move |&&b| a < b).map(move |&b| (a, b))).collect()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_width(&self) -> usize {
        self.features.ncols()
    }

    pub fn node_labels(&self) -> Option<&[f64]> {
        self.node_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<&[f64]> {
        self.graph_label.as_deref()
    }

    pub fn first_isolated(&self) -> Option<usize> {
        (0..self.num_nodes()).find(|&v| self.degree(v) == 0)
    }

    /// Dense 0/1 adjacency matrix.
    pub fn dense_adjacency(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut a = Array2::zeros((n, n));
        for v in 0..n {
            for &u in self.neighbors(v) {
                a[[v, u]] = 1.0;
            }
        }
        a
    }

    /// Relabels node `v` as `perm[v]`, carrying features and labels along.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Validation("permutation is not a bijection on the nodes".into()));
        }
        let edges: Vec<(usize, usize)> = self.edges().into_iter().map(|(a, b)| (perm[a], perm[b])).collect();
        let mut features = Array2::zeros(self.features.raw_dim());
        for v in 0..n {
            features.row_mut(perm[v]).assign(&self.features.row(v));
        }
        let mut g = Graph::from_edges(n, &edges)?.with_features(features)?;
        if let Some(labels) = &self.node_labels {
            let mut permuted = vec![0.0; n];
            for v in 0..n {
                permuted[perm[v]] = labels[v];
            }
            g.node_labels = Some(permuted);
        }
        g.graph_label = self.graph_label.clone();
        Ok(g)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.num_nodes();
        for v in 0..n {
            let list = self.neighbors(v);
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!("neighbors of {v} not strictly sorted")));
            }
            for &u in list {
                if u == v {
                    return Err(Error::Validation(format!("self-loop at {v}")));
                }
                if u >= n || !self.has_edge(u, v) {
                    return Err(Error::Validation(format!("edge ({v}, {u}) is not symmetric")));
                }
            }
        }
        if self.features.nrows() != n {
            return Err(Error::width("node feature rows", n, self.features.nrows()));
        }
        Ok(())
    }
}
