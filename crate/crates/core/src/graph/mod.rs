//! Graph ingestion, edge splits and frozen neighborhood sampling.
//!
//! Every randomized step of dataset preparation lives here and is driven by
//! an explicit seed, so training and evaluation downstream are deterministic.

mod sampling;
mod split;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::SparseRows;

pub use sampling::{build_neighbor_table, NeighborTable};
pub use split::{remove_edges, split_edges, EdgeSplit, NegativeSampler};

/// Undirected edge stored with the smaller endpoint first.
pub type Edge = (usize, usize);

pub fn canonical(a: usize, b: usize) -> Edge {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown node id {id:?}")]
    UnknownNode {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("invalid graph input: {0}")]
    Validation(String),
    #[error("invalid fraction: {0}")]
    Fraction(String),
    #[error("split would leave the {0} set empty")]
    EmptySplit(&'static str),
    #[error("graph too dense: need {needed} negative pairs but only {available} non-edges are available")]
    TooDense { needed: usize, available: usize },
    #[error("split file: {0}")]
    SplitFormat(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dense index <-> external node id mapping. Ids are assigned in order of
/// first appearance in the edge file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Identity mapping `"0".."n-1"`, handy for synthetic graphs.
    pub fn sequential(n: usize) -> Self {
        let mut m = Self::new();
        for i in 0..n {
            m.intern(&i.to_string());
        }
        m
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Writes one `index id` line per node.
    pub fn write(&self, path: &Path) -> Result<(), GraphError> {
        let mut out = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            writeln!(out, "{i} {name}").expect("write to Vec");
        }
        fs::write(path, out).map_err(io_err(path))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    SparseAttributes,
    OneHotAdjacency,
}

/// Where node input features come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    /// Row `i` of the adjacency matrix is node `i`'s input.
    OneHot,
    /// `node_id idx:val idx:val ...` lines.
    File(PathBuf),
}

/// Sparse node-by-attribute matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    mode: FeatureMode,
    rows: Arc<SparseRows>,
}

impl FeatureMatrix {
    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &SparseRows {
        &self.rows
    }

    /// Copies the rows of `nodes` (in order) into a new sparse block.
    pub fn gather(&self, nodes: &[usize]) -> SparseRows {
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for &n in nodes {
            let (idx, val) = self.rows.row(n);
            indices.extend_from_slice(idx);
            values.extend_from_slice(val);
            offsets.push(indices.len());
        }
        SparseRows::new(self.dim(), offsets, indices, values).expect("rows copied from a valid matrix")
    }
}

/// Immutable undirected graph in compressed sparse row form.
#[derive(Clone, Debug)]
pub struct Graph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: FeatureMatrix,
    attributes: Option<Arc<SparseRows>>,
    ids: Arc<IdMap>,
}

impl Graph {
    /// Builds a graph over the nodes of `ids`. Edges are symmetrized and
    /// deduplicated and self-loops are dropped. Without `attributes` the
    /// features are the one-hot adjacency rows.
    pub fn from_edges(
        ids: Arc<IdMap>,
        edges: impl IntoIterator<Item = Edge>,
        attributes: Option<Arc<SparseRows>>,
    ) -> Result<Self, GraphError> {
        let n = ids.len();
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::Validation(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                continue;
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut list in adjacency {
            list.sort_unstable();
            list.dedup();
            targets.extend(list);
            offsets.push(targets.len());
        }
        if let Some(attr) = &attributes {
            if attr.rows() != n {
                return Err(GraphError::Validation(format!(
                    "{} feature rows for {n} nodes",
                    attr.rows()
                )));
            }
        }
        let features = match &attributes {
            Some(attr) => FeatureMatrix {
                mode: FeatureMode::SparseAttributes,
                rows: attr.clone(),
            },
            None => FeatureMatrix {
                mode: FeatureMode::OneHotAdjacency,
                rows: Arc::new(
                    SparseRows::new(n, offsets.clone(), targets.clone(), vec![1.0; targets.len()])
                        .expect("adjacency is a valid sparse matrix"),
                ),
            },
        };
        Ok(Self {
            offsets,
            targets,
            features,
            attributes,
            ids,
        })
    }

    /// Graph on the same node set with a different edge set. Attribute
    /// features carry over; one-hot features follow the new adjacency.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = Edge>) -> Result<Self, GraphError> {
        Self::from_edges(self.ids.clone(), edges, self.attributes.clone())
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.targets[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// All undirected edges, smaller endpoint first, in ascending order.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.num_edges());
        for a in 0..self.num_nodes() {
            for &b in self.neighbors(a) {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn ids(&self) -> &IdMap {
        &self.ids
    }

    pub fn shared_ids(&self) -> Arc<IdMap> {
        self.ids.clone()
    }
}

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Loads a whitespace-separated edge list and attaches node features.
pub fn load_graph(edge_list: &Path, features: &FeatureSource) -> Result<Graph, GraphError> {
    let text = read(edge_list)?;
    let mut ids = IdMap::new();
    let mut edges = Vec::new();
    let mut self_loops = 0usize;
    for (line, content) in content_lines(&text) {
        let mut tokens = content.split_whitespace();
        let (Some(a), Some(b), None) = (tokens.next(), tokens.next(), tokens.next()) else {
            return Err(GraphError::Parse {
                path: edge_list.to_path_buf(),
                line,
                message: format!("expected two node ids, got {content:?}"),
            });
        };
        let (a, b) = (ids.intern(a), ids.intern(b));
        if a == b {
            self_loops += 1;
            continue;
        }
        edges.push((a, b));
    }
    if self_loops > 0 {
        log::warn!(
            "{}: dropped {self_loops} self-loop line(s)",
            edge_list.display()
        );
    }
    let attributes = match features {
        FeatureSource::OneHot => None,
        FeatureSource::File(path) => Some(Arc::new(load_attributes(path, &ids)?)),
    };
    Graph::from_edges(Arc::new(ids), edges, attributes)
}

fn load_attributes(path: &Path, ids: &IdMap) -> Result<SparseRows, GraphError> {
    let text = read(path)?;
    let parse_err = |line: usize, message: String| GraphError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows: Vec<Option<Vec<(usize, f64)>>> = vec![None; ids.len()];
    let mut dim = 0usize;
    for (line, content) in content_lines(&text) {
        let mut tokens = content.split_whitespace();
        let id = tokens.next().expect("non-empty line has a token");
        let node = ids.get(id).ok_or_else(|| GraphError::UnknownNode {
            path: path.to_path_buf(),
            line,
            id: id.to_owned(),
        })?;
        if rows[node].is_some() {
            return Err(GraphError::Validation(format!(
                "{}:{line}: node {id:?} has more than one feature row",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(line, format!("expected idx:val, got {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(line, format!("bad feature index {idx:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(line, format!("bad feature value {val:?}")))?;
            if !val.is_finite() {
                return Err(parse_err(line, format!("non-finite feature value {val}")));
            }
            dim = dim.max(idx + 1);
            entries.push((idx, val));
        }
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(GraphError::Validation(format!(
                "{}:{line}: duplicate feature index for node {id:?}",
                path.display()
            )));
        }
        rows[node] = Some(entries);
    }
    let missing = rows.iter().filter(|r| r.is_none()).count();
    if missing > 0 {
        log::warn!(
            "{}: {missing} node(s) have no feature row; using all-zero features",
            path.display()
        );
    }
    let mut offsets = vec![0];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for row in rows {
        for (i, v) in row.unwrap_or_default() {
            indices.push(i);
            values.push(v);
        }
        offsets.push(indices.len());
    }
    Ok(SparseRows::new(dim, offsets, indices, values).expect("indices bounded by dim"))
}

/// Reads `node_id label` lines into a dense label vector over `ids`.
/// Every node must be labeled; labels are arbitrary strings mapped to
/// `0..num_classes` in order of first appearance.
pub fn load_labels(path: &Path, ids: &IdMap) -> Result<(Vec<usize>, Vec<String>), GraphError> {
    let text = read(path)?;
    let mut classes = IdMap::new();
    let mut labels: Vec<Option<usize>> = vec![None; ids.len()];
    for (line, content) in content_lines(&text) {
        let mut tokens = content.split_whitespace();
        let (Some(id), Some(label), None) = (tokens.next(), tokens.next(), tokens.next()) else {
            return Err(GraphError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected `node_id label`, got {content:?}"),
            });
        };
        let node = ids.get(id).ok_or_else(|| GraphError::UnknownNode {
            path: path.to_path_buf(),
            line,
            id: id.to_owned(),
        })?;
        labels[node] = Some(classes.intern(label));
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| {
                GraphError::Validation(format!(
                    "{}: node {:?} has no label",
                    path.display(),
                    ids.name(i)
                ))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((labels, classes.names))
}
