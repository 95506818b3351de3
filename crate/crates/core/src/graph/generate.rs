//! Deterministic graph generators used as fixtures and synthetic data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::structure::{count_substructure_per_node, Pattern};
use super::{Dataset, Graph, Split, Task};
use crate::error::{Error, Result};

pub fn gen_cycle(n: usize) -> Result<Graph> {
    if n < 3 {
        return Err(Error::Validation(format!("a cycle needs at least 3 nodes, got {n}")));
    }
    let edges: Vec<_> = (0..n).map(|v| (v, (v + 1) % n)).collect();
    Graph::from_edges(n, &edges)
}

pub fn gen_path(n: usize) -> Result<Graph> {
    if n < 2 {
        return Err(Error::Validation(format!("a path needs at least 2 nodes, got {n}")));
    }
    let edges: Vec<_> = (0..n - 1).map(|v| (v, v + 1)).collect();
    Graph::from_edges(n, &edges)
}

pub fn gen_complete(n: usize) -> Result<Graph> {
    if n < 1 {
        return Err(Error::Validation("complete graph needs at least 1 node".into()));
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            edges.push((a, b));
        }
    }
    Graph::from_edges(n, &edges)
}

/// Star with node 0 at the center and `leaves` leaves.
pub fn gen_star(leaves: usize) -> Result<Graph> {
    if leaves < 1 {
        return Err(Error::Validation("a star needs at least one leaf".into()));
    }
    let edges: Vec<_> = (1..=leaves).map(|v| (0, v)).collect();
    Graph::from_edges(leaves + 1, &edges)
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("edge probability {p} outside [0, 1]")));
    }
    Ok(())
}

pub fn gen_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Graph> {
    check_probability(p)?;
    if n < 1 {
        return Err(Error::Validation("graph needs at least 1 node".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    Graph::from_edges(n, &edges)
}

/// Erdős–Rényi sample with every degree capped at `max_degree`: candidate
/// edges are visited in random order and kept while both ends have room.
pub fn gen_bounded_degree(n: usize, p: f64, max_degree: usize, seed: u64) -> Result<Graph> {
    check_probability(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            candidates.push((a, b));
        }
    }
    candidates.shuffle(&mut rng);
    let mut degree = vec![0usize; n];
    let mut edges = Vec::new();
    for (a, b) in candidates {
        if rng.gen::<f64>() < p && degree[a] < max_degree && degree[b] < max_degree {
            degree[a] += 1;
            degree[b] += 1;
            edges.push((a, b));
        }
    }
    Graph::from_edges(n, &edges)
}

/// Uniform-ish random `degree`-regular graph via the pairing model, retrying
/// until the pairing is simple.
pub fn gen_random_regular(n: usize, degree: usize, seed: u64) -> Result<Graph> {
    if degree >= n || !(n * degree).is_multiple_of(2) {
        return Err(Error::Validation(format!("no simple {degree}-regular graph on {n} nodes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, degree)).collect();
    'attempt: for _ in 0..10_000 {
        stubs.shuffle(&mut rng);
        let mut edges = Vec::with_capacity(stubs.len() / 2);
        for pair in stubs.chunks(2) {
            let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if a == b || edges.contains(&(a, b)) {
                continue 'attempt;
            }
            edges.push((a, b));
        }
        return Graph::from_edges(n, &edges);
    }
    Err(Error::Validation(format!("pairing model failed to produce a simple {degree}-regular graph on {n} nodes")))
}

/// Node-regression dataset of Erdős–Rényi graphs with between `min_nodes` and
/// `max_nodes` nodes, labelled by the number of `pattern` cycles through each
/// node. The graphs are split 70/15/15.
pub fn gen_counting_dataset(num_graphs: usize, min_nodes: usize, max_nodes: usize, p: f64, pattern: Pattern, seed: u64) -> Result<Dataset> {
    if num_graphs < 3 || min_nodes < 1 || min_nodes > max_nodes {
        return Err(Error::Validation(format!(
            "need at least 3 graphs and 1 <= min_nodes <= max_nodes, got {num_graphs}, {min_nodes}, {max_nodes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(num_graphs);
    for _ in 0..num_graphs {
        let n = rng.gen_range(min_nodes..=max_nodes);
        let g = gen_erdos_renyi(n, p, rng.gen())?;
        let labels = count_substructure_per_node(&g, pattern).into_iter().map(|c| c as f64).collect();
        graphs.push(g.with_node_labels(labels)?);
    }
    let train = num_graphs * 7 / 10;
    let val = (num_graphs - train) / 2;
    let split = Split { train: (0..train).collect(), val: (train..train + val).collect(), test: (train + val..num_graphs).collect() };
    Dataset::new(graphs, Task::NodeRegression, split)
}
