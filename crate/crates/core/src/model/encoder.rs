use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::layer::{Dropout, Neighborhoods};
use super::{
    attention_coefficients, edge_score, layer_forward, Activation, BoundParams, LayerInput,
    ModelError, ModelParams,
};
use crate::autodiff::{Segments, Tape, Tensor, Var};
use crate::graph::{FeatureMatrix, Graph, NeighborTable};

/// Centers per tape when encoding many nodes without gradients.
const ENCODE_CHUNK: usize = 128;

/// Input rows and neighborhoods needed to embed a list of center nodes
/// through the frozen neighbor table.
///
/// Each center `c` expands to `S + 1` first-layer units: `c` itself,
/// attending over `c` and its sampled first-hop neighbors, and each sampled
/// neighbor `v_k`, attending over `v_k` and its second-hop sample. The second
/// layer lets `c` attend over those `S + 1` units. Every node's own row is
/// part of its neighborhood.
#[derive(Clone, Debug)]
pub struct CenterLayout {
    /// Graph node of each first-layer input row.
    pub inputs: Vec<usize>,
    pub hood1: Neighborhoods,
    pub hood2: Neighborhoods,
}

impl CenterLayout {
    pub fn new(table: &NeighborTable, centers: &[usize]) -> Result<Self, ModelError> {
        let n = table.num_nodes();
        if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
            return Err(ModelError::NodeOutOfRange {
                node: bad,
                num_nodes: n,
            });
        }
        let s = table.sample_size();
        let unit = s + 1;
        let mut rows: HashMap<usize, usize> = HashMap::new();
        let mut inputs = Vec::new();
        let mut row_of = |node: usize| {
            *rows.entry(node).or_insert_with(|| {
                inputs.push(node);
                inputs.len() - 1
            })
        };
        let units = centers.len() * unit;
        let mut unit_rows = Vec::with_capacity(units);
        let mut offsets = Vec::with_capacity(units + 1);
        let mut sources = Vec::with_capacity(units * unit);
        offsets.push(0);
        for &c in centers {
            let first = table.hop1(c);
            let mut push_unit = |node: usize, members: &[usize]| {
                let r = row_of(node);
                unit_rows.push(r);
                sources.push(r);
                sources.extend(members.iter().map(|&m| row_of(m)));
                offsets.push(sources.len());
            };
            push_unit(c, first);
            for (k, &v) in first.iter().enumerate() {
                push_unit(v, table.hop2(c, k));
            }
        }
        let hood1 = Neighborhoods::new(unit_rows, Segments::new(offsets, sources)?)?;
        let hood2 = Neighborhoods::new(
            (0..centers.len()).map(|i| i * unit).collect(),
            Segments::contiguous(centers.len(), unit),
        )?;
        Ok(Self {
            inputs,
            hood1,
            hood2,
        })
    }
}

/// Embeddings of `layout`'s centers as a tape value (`centers x d`).
pub fn encode_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    layout: &CenterLayout,
    features: &FeatureMatrix,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var, ModelError> {
    let x = Arc::new(features.gather(&layout.inputs));
    let h1 = layer_forward(
        tape,
        &params.layer1,
        &LayerInput::Sparse(x),
        &layout.hood1,
        Activation::Elu,
        dropout.as_deref_mut(),
    )?;
    let h1 = match dropout.as_deref_mut() {
        Some(d) => d.apply(tape, h1)?,
        None => h1,
    };
    layer_forward(
        tape,
        &params.layer2,
        &LayerInput::Dense(h1),
        &layout.hood2,
        Activation::Identity,
        dropout,
    )
}

/// Link logits `theta . (e_l * e_r)` for rows `left[i]`, `right[i]` of `emb`
/// (`pairs x 1`).
pub fn logits_on_tape(
    tape: &mut Tape,
    theta: Var,
    emb: Var,
    left: Arc<[usize]>,
    right: Arc<[usize]>,
) -> Result<Var, ModelError> {
    let l = tape.gather_rows(emb, left)?;
    let r = tape.gather_rows(emb, right)?;
    let e = tape.hadamard(l, r)?;
    Ok(tape.matmul(e, theta)?)
}

/// Link probabilities: the sigmoid of [`logits_on_tape`].
pub fn score_on_tape(
    tape: &mut Tape,
    theta: Var,
    emb: Var,
    left: Arc<[usize]>,
    right: Arc<[usize]>,
) -> Result<Var, ModelError> {
    let logits = logits_on_tape(tape, theta, emb, left, right)?;
    Ok(tape.sigmoid(logits)?)
}

fn check_inputs(
    params: &ModelParams,
    table: &NeighborTable,
    features: &FeatureMatrix,
) -> Result<(), ModelError> {
    params.validate()?;
    if features.dim() != params.config.in_dim {
        return Err(ModelError::Config(format!(
            "features have {} columns but the model expects {}",
            features.dim(),
            params.config.in_dim
        )));
    }
    if table.sample_size() != params.config.sample_size {
        return Err(ModelError::Config(format!(
            "neighbor table samples {} but the model expects {}",
            table.sample_size(),
            params.config.sample_size
        )));
    }
    if features.rows().rows() != table.num_nodes() {
        return Err(ModelError::Config(format!(
            "{} feature rows for {} nodes",
            features.rows().rows(),
            table.num_nodes()
        )));
    }
    Ok(())
}

/// Embeddings of `nodes` in order (`nodes x d`), without gradients.
///
/// Work is split into fixed chunks; each chunk's result is independent of
/// the thread count, so output is deterministic.
pub fn encode(
    params: &ModelParams,
    table: &NeighborTable,
    features: &FeatureMatrix,
    nodes: &[usize],
) -> Result<Tensor, ModelError> {
    check_inputs(params, table, features)?;
    let d = params.config.embed_dim;
    let chunks: Vec<Vec<f64>> = nodes
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| -> Result<Vec<f64>, ModelError> {
            let layout = CenterLayout::new(table, chunk)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false)?;
            let emb = encode_on_tape(&mut tape, &bound, &layout, features, None)?;
            Ok(tape.value(emb).data().to_vec())
        })
        .collect::<Result<_, _>>()?;
    Ok(Tensor::from_vec(nodes.len(), d, chunks.concat())?)
}

/// Link probabilities for node pairs.
pub fn score_pairs(
    params: &ModelParams,
    table: &NeighborTable,
    features: &FeatureMatrix,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>, ModelError> {
    let mut nodes: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let emb = encode(params, table, features, &nodes)?;
    let row = |v: usize| emb.row(nodes.binary_search(&v).expect("node was encoded"));
    pairs
        .iter()
        .map(|&(a, b)| edge_score(&params.theta, row(a), row(b)))
        .collect()
}

/// Second-layer attention over complete neighborhoods.
#[derive(Clone, Debug)]
pub struct LayerAttention {
    /// Node attending in each segment.
    pub centers: Vec<usize>,
    /// Segment `s` lists the neighbors of `centers[s]`.
    pub segments: Segments,
    /// Coefficients per head, one per segment position.
    pub heads: Vec<Vec<f64>>,
}

/// Attention the trained second layer pays across the full adjacency of
/// `graph`, with the first layer also run over full neighborhoods (each node
/// plus all its neighbors).
///
/// In the second layer each non-isolated node attends over its neighbors
/// only; its own slot is left out so coefficients measure how much each
/// neighbor is attended to. Isolated nodes contribute no segment.
pub fn full_neighborhood_attention(
    params: &ModelParams,
    graph: &Graph,
    features: &FeatureMatrix,
) -> Result<LayerAttention, ModelError> {
    params.validate()?;
    let n = graph.num_nodes();
    if features.dim() != params.config.in_dim || features.rows().rows() != n {
        return Err(ModelError::Config(format!(
            "features are {}x{} but the model expects {n}x{}",
            features.rows().rows(),
            features.dim(),
            params.config.in_dim
        )));
    }
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| std::iter::once(i).chain(graph.neighbors(i).iter().copied()).collect())
        .collect();
    let hood1 = Neighborhoods::from_lists((0..n).collect(), &lists)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let x = Arc::new(features.rows().clone());
    let h1 = layer_forward(
        &mut tape,
        &bound.layer1,
        &LayerInput::Sparse(x),
        &hood1,
        Activation::Elu,
        None,
    )?;
    let h1 = tape.value(h1).clone();
    drop(lists);

    let centers: Vec<usize> = (0..n).filter(|&j| graph.degree(j) > 0).collect();
    let nbr_lists: Vec<&[usize]> = centers.iter().map(|&j| graph.neighbors(j)).collect();
    let segments = Segments::from_lists(&nbr_lists);
    let hood2 = Neighborhoods::new(centers.clone(), segments.clone())?;
    let layer = &params.layer2;
    let heads = (0..layer.heads())
        .map(|k| {
            let att = layer.attention.as_ref().map(|a| &a[k]);
            match att {
                Some(_) => {
                    let z = h1.matmul(&layer.weights[k])?;
                    attention_coefficients(att, &z, &hood2)
                }
                None => attention_coefficients(None, &h1, &hood2),
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(LayerAttention {
        centers,
        segments,
        heads,
    })
}
