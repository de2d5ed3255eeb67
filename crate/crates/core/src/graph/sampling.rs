use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{canonical, Edge, Graph, GraphError};

/// Fixed-size first- and second-order neighbor samples, drawn once and
/// frozen for the lifetime of a model.
///
/// `hop1(i)` holds `S` neighbors of `i`; `hop2(i, k)` holds `S` neighbors of
/// `hop1(i)[k]`, sampled independently for each `(i, k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    sample_size: usize,
    num_nodes: usize,
    seed: u64,
    hop1: Vec<usize>,
    hop2: Vec<usize>,
}

/// Appends `size` samples from the neighbors of `node`. Short lists are
/// sampled with replacement, long ones without; isolated nodes sample
/// themselves.
fn sample_into(g: &Graph, node: usize, size: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
    let nbrs = g.neighbors(node);
    match nbrs.len() {
        0 => out.extend(std::iter::repeat_n(node, size)),
        d if d < size => out.extend((0..size).map(|_| nbrs[rng.gen_range(0..d)])),
        d => out.extend(index::sample(rng, d, size).into_iter().map(|k| nbrs[k])),
    }
}

impl NeighborTable {
    /// Samples from the adjacency of `train_graph`, which should contain the
    /// training edges only.
    pub fn from_graph(train_graph: &Graph, sample_size: usize, seed: u64) -> Result<Self, GraphError> {
        if sample_size == 0 {
            return Err(GraphError::Validation("sample size must be at least 1".into()));
        }
        let n = train_graph.num_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hop1 = Vec::with_capacity(n * sample_size);
        let mut hop2 = Vec::with_capacity(n * sample_size * sample_size);
        for node in 0..n {
            let start = hop1.len();
            sample_into(train_graph, node, sample_size, &mut rng, &mut hop1);
            for k in start..start + sample_size {
                let first = hop1[k];
                sample_into(train_graph, first, sample_size, &mut rng, &mut hop2);
            }
        }
        Ok(Self {
            sample_size,
            num_nodes: n,
            seed,
            hop1,
            hop2,
        })
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hop1(&self, node: usize) -> &[usize] {
        let s = self.sample_size;
        &self.hop1[node * s..(node + 1) * s]
    }

    pub fn hop2(&self, node: usize, k: usize) -> &[usize] {
        let s = self.sample_size;
        let base = (node * s + k) * s;
        &self.hop2[base..base + s]
    }
}

/// Builds the frozen table for `g` restricted to `train_edges`, so held-out
/// edges never take part in message passing.
pub fn build_neighbor_table(
    g: &Graph,
    train_edges: &[Edge],
    sample_size: usize,
    seed: u64,
) -> Result<NeighborTable, GraphError> {
    if let Some(&(a, b)) = train_edges
        .iter()
        .find(|&&(a, b)| a >= g.num_nodes() || b >= g.num_nodes() || !g.has_edge(a, b))
    {
        return Err(GraphError::Validation(format!(
            "training pair {:?} is not an edge of the graph",
            canonical(a, b)
        )));
    }
    let train = g.with_edges(train_edges.iter().copied())?;
    NeighborTable::from_graph(&train, sample_size, seed)
}
