//! TU-collection benchmark datasets.
//!
//! A dataset directory `root/NAME` holds line-oriented text files:
//! `NAME_A.txt` (comma-separated 1-based global node id pairs),
//! `NAME_graph_indicator.txt` (1-based graph id per node),
//! `NAME_graph_labels.txt` (one label per graph) and, optionally,
//! `NAME_node_labels.txt` and `NAME_node_attributes.txt`.

mod fixture;
mod folds;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

pub use fixture::{read_fixture, write_fixture};
pub use folds::{make_folds, FoldPlan};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One input graph: undirected simple edges, dense node features, class.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub node_count: usize,
    /// Each undirected edge once, as `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// `node_count × d`.
    pub features: Tensor,
    pub label: usize,
}

impl Graph {
    /// Validates invariants and canonicalizes the edge list.
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Tensor,
        label: usize,
    ) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::Contract("graph needs at least one node".into()));
        }
        if features.shape().len() != 2 || features.shape()[0] != node_count {
            return Err(Error::Contract(format!(
                "feature matrix {:?} does not match {node_count} nodes",
                features.shape()
            )));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(Error::Contract(format!(
                    "edge ({a}, {b}) outside 0..{node_count}"
                )));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        Ok(Graph {
            node_count,
            edges: set.into_iter().collect(),
            features,
            label,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Both orientations of every edge: `(i, j)` then `(j, i)`.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect()
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.node_count, "permutation length");
        let d = self.feature_dim();
        let mut features = Tensor::zeros(&[self.node_count, d]);
        for v in 0..self.node_count {
            for c in 0..d {
                features.set(perm[v], c, self.features.at(v, c));
            }
        }
        Graph::new(
            self.node_count,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])),
            features,
            self.label,
        )
        .expect("permutation preserves validity")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>, num_classes: usize) -> Result<Self> {
        let name = name.into();
        let feature_dim = graphs.first().map_or(0, Graph::feature_dim);
        if graphs.iter().any(|g| g.feature_dim() != feature_dim) {
            return Err(Error::MalformedDataset(format!("{name}: graphs disagree on feature width")));
        }
        if num_classes < 2 {
            return Err(Error::MalformedDataset(format!(
                "{name}: need at least 2 classes, found {num_classes}"
            )));
        }
        let mut seen = vec![false; num_classes];
        for g in &graphs {
            if g.label >= num_classes {
                return Err(Error::MalformedDataset(format!(
                    "{name}: label {} outside 0..{num_classes}",
                    g.label
                )));
            }
            seen[g.label] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::MalformedDataset(format!("{name}: class {c} has no graphs")));
        }
        Ok(Dataset {
            name,
            graphs,
            num_classes,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn max_nodes(&self) -> usize {
        self.graphs.iter().map(|g| g.node_count).max().unwrap_or(0)
    }

    /// Dataset restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }
}

struct Lines {
    path: PathBuf,
    lines: Vec<(usize, String)>,
}

impl Lines {
    fn read(path: PathBuf) -> Result<Self> {
        let text = fs::read_to_string(&path)?;
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim().to_string()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        Ok(Lines { path, lines })
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn integers(&self) -> Result<Vec<(usize, i64)>> {
        self.lines
            .iter()
            .map(|(n, l)| {
                l.parse::<i64>()
                    .map(|v| (*n, v))
                    .map_err(|_| self.err(*n, format!("expected an integer, found {l:?}")))
            })
            .collect()
    }
}

fn required(dir: &Path, name: &str, suffix: &str) -> Result<PathBuf> {
    let path = dir.join(format!("{name}_{suffix}.txt"));
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MalformedDataset(format!("missing required file {}", path.display())))
    }
}

fn optional(dir: &Path, name: &str, suffix: &str) -> Option<PathBuf> {
    let path = dir.join(format!("{name}_{suffix}.txt"));
    path.is_file().then_some(path)
}

/// Parses `root/name` in TU format; node labels become one-hot columns
/// (ascending label value), followed by node attributes.
pub fn parse_tu_dataset(root: &Path, name: &str) -> Result<Dataset> {
    let dir = root.join(name);
    if !dir.is_dir() {
        return Err(Error::MalformedDataset(format!(
            "dataset directory {} not found",
            dir.display()
        )));
    }
    let adjacency = Lines::read(required(&dir, name, "A")?)?;
    let indicator = Lines::read(required(&dir, name, "graph_indicator")?)?;
    let graph_labels = Lines::read(required(&dir, name, "graph_labels")?)?;

    let raw_labels = graph_labels.integers()?;
    let graph_count = raw_labels.len();
    if graph_count == 0 {
        return Err(Error::MalformedDataset(format!("{name}: no graphs")));
    }

    // node -> (graph, local index)
    let mut node_graph = Vec::with_capacity(indicator.lines.len());
    let mut sizes = vec![0usize; graph_count];
    for (line, g) in indicator.integers()? {
        if g < 1 || g as usize > graph_count {
            return Err(indicator.err(
                line,
                format!("graph id {g} outside 1..={graph_count}"),
            ));
        }
        let g = g as usize - 1;
        node_graph.push((g, sizes[g]));
        sizes[g] += 1;
    }
    let node_total = node_graph.len();
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::MalformedDataset(format!("{name}: graph {} has no nodes", g + 1)));
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    for (line, text) in &adjacency.lines {
        let mut parts = text.split(',').map(str::trim);
        let mut endpoint = || -> Result<usize> {
            let field = parts
                .next()
                .ok_or_else(|| adjacency.err(*line, "expected two comma-separated node ids"))?;
            let v: i64 = field
                .parse()
                .map_err(|_| adjacency.err(*line, format!("expected an integer, found {field:?}")))?;
            if v < 1 || v as usize > node_total {
                return Err(adjacency.err(*line, format!("node id {v} outside 1..={node_total}")));
            }
            Ok(v as usize - 1)
        };
        let (a, b) = (endpoint()?, endpoint()?);
        if parts.next().is_some() {
            return Err(adjacency.err(*line, "expected exactly two node ids"));
        }
        let ((ga, la), (gb, lb)) = (node_graph[a], node_graph[b]);
        if ga != gb {
            return Err(adjacency.err(
                *line,
                format!("edge joins graphs {} and {}", ga + 1, gb + 1),
            ));
        }
        edges[ga].push((la, lb));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); node_total];
    if let Some(path) = optional(&dir, name, "node_labels") {
        let lines = Lines::read(path)?;
        let labels = lines.integers()?;
        if labels.len() != node_total {
            return Err(Error::MalformedDataset(format!(
                "{}: {} node labels for {node_total} nodes",
                lines.path.display(),
                labels.len()
            )));
        }
        let values: BTreeSet<i64> = labels.iter().map(|&(_, v)| v).collect();
        let slot: BTreeMap<i64, usize> = values.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        for (row, (_, v)) in columns.iter_mut().zip(&labels) {
            let mut onehot = vec![0.0; slot.len()];
            onehot[slot[v]] = 1.0;
            row.extend(onehot);
        }
    }
    if let Some(path) = optional(&dir, name, "node_attributes") {
        let lines = Lines::read(path)?;
        if lines.lines.len() != node_total {
            return Err(Error::MalformedDataset(format!(
                "{}: {} attribute rows for {node_total} nodes",
                lines.path.display(),
                lines.lines.len()
            )));
        }
        let mut width = None;
        for (row, (line, text)) in columns.iter_mut().zip(&lines.lines) {
            let values = text
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| lines.err(*line, format!("expected a real number, found {:?}", f.trim())))
                })
                .collect::<Result<Vec<_>>>()?;
            if *width.get_or_insert(values.len()) != values.len() {
                return Err(lines.err(*line, "attribute row width differs from earlier rows"));
            }
            row.extend(values);
        }
    }
    let d = columns.first().map_or(0, Vec::len);

    let label_values: BTreeSet<i64> = raw_labels.iter().map(|&(_, v)| v).collect();
    let label_slot: BTreeMap<i64, usize> =
        label_values.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    let mut per_graph_rows: Vec<Vec<f64>> = sizes.iter().map(|&s| Vec::with_capacity(s * d)).collect();
    for ((g, _), row) in node_graph.iter().zip(columns) {
        per_graph_rows[*g].extend(row);
    }
    let graphs = per_graph_rows
        .into_iter()
        .zip(edges)
        .enumerate()
        .map(|(g, (rows, e))| {
            Graph::new(
                sizes[g],
                e,
                Tensor::new(&[sizes[g], d], rows),
                label_slot[&raw_labels[g].1],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(name, graphs, label_slot.len())
}

/// Appends `ln(1 + deg) / ln(1 + deg_max)` to every node, with `deg_max`
/// taken over the whole dataset. Edgeless datasets get zeros.
pub fn augment_degree_features(dataset: &Dataset) -> Dataset {
    let deg_max = dataset
        .graphs
        .iter()
        .flat_map(Graph::degrees)
        .max()
        .unwrap_or(0);
    if deg_max == 0 {
        log::warn!(
            "{}: every graph is edgeless; degree feature set to 0",
            dataset.name
        );
    }
    let denom = (1.0 + deg_max as f64).ln();
    let graphs = dataset
        .graphs
        .iter()
        .map(|g| {
            let d = g.feature_dim();
            let mut data = Vec::with_capacity(g.node_count * (d + 1));
            for (v, deg) in g.degrees().into_iter().enumerate() {
                data.extend_from_slice(&g.features.data()[v * d..(v + 1) * d]);
                data.push(if deg_max == 0 { 0.0 } else { (1.0 + deg as f64).ln() / denom });
            }
            Graph {
                node_count: g.node_count,
                edges: g.edges.clone(),
                features: Tensor::new(&[g.node_count, d + 1], data),
                label: g.label,
            }
        })
        .collect();
    Dataset {
        name: dataset.name.clone(),
        graphs,
        num_classes: dataset.num_classes,
        feature_dim: dataset.feature_dim + 1,
    }
}
