//! JSON graph files and dataset directories.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};

/// On-disk graph schema. Edges are listed once per undirected edge.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_labels: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_label: Option<Vec<f64>>,
}

impl GraphFile {
    pub fn into_graph(self) -> Result<Graph> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        let mut g = Graph::from_edges(self.num_nodes, &edges)?;
        if let Some(rows) = self.node_features {
            g = g.with_features(crate::json::from_rows(rows, 0, "node_features")?)?;
        }
        if let Some(labels) = self.node_labels {
            g = g.with_node_labels(labels)?;
        }
        if let Some(label) = self.graph_label {
            g = g.with_graph_label(label);
        }
        Ok(g)
    }

    pub fn from_graph(g: &Graph) -> Self {
        GraphFile {
            num_nodes: g.num_nodes(),
            edges: g.edges().into_iter().map(|(a, b)| [a, b]).collect(),
            node_features: Some(crate::json::to_rows(g.features())),
            node_labels: g.node_labels().map(<[f64]>::to_vec),
            graph_label: g.graph_label().map(<[f64]>::to_vec),
        }
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub(crate) fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, context: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|source| Error::Parse { context: context.display().to_string(), source })
}

pub(crate) fn parse_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    parse_json(&read_to_string(path)?, path)
}

pub fn load_graph_json(path: impl AsRef<Path>) -> Result<Graph> {
    let file: GraphFile = parse_json_file(path.as_ref())?;
    file.into_graph()
}

pub fn save_graph_json(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string(&GraphFile::from_graph(g)).expect("graph serializes");
    write_string(path.as_ref(), &text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    GraphRegression,
    NodeRegression,
    GraphClassification,
}

impl Task {
    pub fn is_node_level(self) -> bool {
        matches!(self, Task::NodeRegression)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub task: Task,
    pub split: Split,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, task: Task, split: Split) -> Result<Self> {
        let ds = Dataset { graphs, task, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.graphs.len()];
        for &i in self.split.train.iter().chain(&self.split.val).chain(&self.split.test) {
            if i >= self.graphs.len() {
                return Err(Error::Validation(format!("split index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!("graph {i} appears in two splits")));
            }
        }
        for (i, g) in self.graphs.iter().enumerate() {
            let ok = match self.task {
                Task::NodeRegression => g.node_labels().is_some(),
                _ => g.graph_label().is_some(),
            };
            if !ok {
                return Err(Error::Validation(format!("graph {i} lacks a label for {:?}", self.task)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

/// Loads `manifest.json` and the graph files it lists from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>, task: Task) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = parse_json(&read_to_string(&manifest_path)?, &manifest_path)?;
    let mut graphs = Vec::new();
    let mut load = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|name| {
                graphs.push(load_graph_json(dir.join(name))?);
                Ok(graphs.len() - 1)
            })
            .collect()
    };
    let split = Split { train: load(&manifest.train)?, val: load(&manifest.val)?, test: load(&manifest.test)? };
    Dataset::new(graphs, task, split)
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let name = |i: usize| format!("graph_{i:05}.json");
    for (i, g) in ds.graphs.iter().enumerate() {
        save_graph_json(g, dir.join(name(i)))?;
    }
    let manifest = Manifest {
        train: ds.split.train.iter().map(|&i| name(i)).collect(),
        val: ds.split.val.iter().map(|&i| name(i)).collect(),
        test: ds.split.test.iter().map(|&i| name(i)).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_string(&dir.join("manifest.json"), &text)
}
