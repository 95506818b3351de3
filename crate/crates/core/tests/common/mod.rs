#![allow(dead_code)]

use hodgnn::Graph;
use ndarray::Array2;
use proptest::prelude::*;

/// A cycle on `n` nodes plus the chords selected by `chords`, so no node is
/// isolated.
pub fn ring_with_chords(n: usize, chords: &[bool]) -> Graph {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let mut c = chords.iter();
    for a in 0..n {
        for b in a + 2..n {
            if (a, b) == (0, n - 1) {
                continue;
            }
            if c.next().copied().unwrap_or(false) {
                edges.push((a, b));
            }
        }
    }
    Graph::from_edges(n, &edges).unwrap()
}

pub fn connected_graph(max_nodes: usize) -> impl Strategy<Value = Graph> {
    (3..=max_nodes)
        .prop_flat_map(|n| proptest::collection::vec(proptest::bool::weighted(0.3), n * n).prop_map(move |c| ring_with_chords(n, &c)))
}

pub fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<usize>>()).prop_shuffle()
}

pub fn graph_and_perm(max_nodes: usize) -> impl Strategy<Value = (Graph, Vec<usize>)> {
    connected_graph(max_nodes).prop_flat_map(|g| {
        let n = g.num_nodes();
        (Just(g), permutation(n))
    })
}

pub fn matrix_power(a: &Array2<f64>, t: usize) -> Array2<f64> {
    let mut p = Array2::eye(a.nrows());
    for _ in 0..t {
        p = p.dot(a);
    }
    p
}

/// Cycles of length `len` through each node, by enumerating ordered tuples
/// of distinct nodes. Each cycle appears `2 * len` times.
pub fn brute_cycles_per_node(g: &Graph, len: usize) -> Vec<u64> {
    fn walk(g: &Graph, len: usize, path: &mut Vec<usize>, counts: &mut [u64]) {
        if path.len() == len {
            if g.has_edge(path[len - 1], path[0]) {
                for &v in path.iter() {
                    counts[v] += 1;
                }
            }
            return;
        }
        for u in 0..g.num_nodes() {
            if !path.contains(&u) && g.has_edge(*path.last().unwrap(), u) {
                path.push(u);
                walk(g, len, path, counts);
                path.pop();
            }
        }
    }
    let mut counts = vec![0; g.num_nodes()];
    for start in 0..g.num_nodes() {
        walk(g, len, &mut vec![start], &mut counts);
    }
    counts.iter().map(|c| c / (2 * len as u64)).collect()
}
