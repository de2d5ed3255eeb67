//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use deeplinker::autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Relative error with a small floor on the denominator so that components
/// that are both essentially zero do not blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Evaluates `f` on a fresh tape with the given inputs registered as params.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

pub struct GradCheck {
    pub probes: usize,
    pub max_rel_err: f64,
}

/// Compares the engine's reverse-mode gradient against central finite
/// differences at up to `probes` randomly chosen input coordinates.
/// `skip` lets callers exclude coordinates that sit near a kink.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    probes: usize,
    seed: u64,
    skip: impl Fn(usize, usize) -> bool,
) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .filter(|&(i, k)| !skip(i, k))
        .collect();
    let mut r = rng(seed);
    let chosen: Vec<(usize, usize)> = if coords.len() <= probes {
        coords
    } else {
        (0..probes)
            .map(|_| coords[r.gen_range(0..coords.len())])
            .collect()
    };

    let mut worst: f64 = 0.0;
    for &(i, k) in &chosen {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[k] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[k] -= FD_STEP;
        let numeric = (eval_scalar(&f, &plus) - eval_scalar(&f, &minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i].data()[k], numeric));
    }
    GradCheck {
        probes: chosen.len(),
        max_rel_err: worst,
    }
}

use std::sync::Arc;

use deeplinker::graph::{Graph, IdMap, NeighborTable};
use deeplinker::model::{
    encode_on_tape, logits_on_tape, AttentionMode, BoundLayer, BoundParams, CenterLayout,
    HeadMerge, ModelConfig, ModelParams,
};

/// Five nodes: a triangle 0-1-2 with a tail 1-3-4.
pub fn five_node_graph() -> Graph {
    let edges = [(0, 1), (0, 2), (1, 2), (1, 3), (3, 4)];
    Graph::from_edges(Arc::new(IdMap::sequential(5)), edges, None).unwrap()
}

/// The path 0-1-2.
pub fn three_node_graph() -> Graph {
    Graph::from_edges(Arc::new(IdMap::sequential(3)), [(0, 1), (1, 2)], None).unwrap()
}

pub fn small_config(in_dim: usize, attention: AttentionMode) -> ModelConfig {
    ModelConfig {
        in_dim,
        heads1: 2,
        hidden: 3,
        heads2: 2,
        embed_dim: 4,
        sample_size: 3,
        attention,
    }
}

/// Rebuilds bound parameters from vars listed in `named_tensors` order.
pub fn bound_from_vars(params: &ModelParams, vars: &[deeplinker::autodiff::Var]) -> BoundParams {
    let c = &params.config;
    let learned = c.attention == AttentionMode::Learned;
    let mut it = vars.iter().copied();
    let mut layer = |heads: usize, merge: HeadMerge| {
        let weights: Vec<_> = it.by_ref().take(heads).collect();
        let attention = learned.then(|| it.by_ref().take(heads).collect());
        BoundLayer {
            weights,
            attention,
            merge,
        }
    };
    let layer1 = layer(c.heads1, HeadMerge::Concat);
    let layer2 = layer(c.heads2, HeadMerge::Average);
    let theta = it.next().unwrap();
    assert!(it.next().is_none());
    BoundParams {
        layer1,
        layer2,
        theta,
    }
}

/// Mean cross-entropy of the full model over labeled pairs, as a function of
/// the parameter tensors (for finite-difference checks).
pub fn model_loss_fn(
    params: &ModelParams,
    graph: &Graph,
    table: &NeighborTable,
    pairs: &[(usize, usize)],
    labels: &[f64],
) -> impl Fn(&mut Tape, &[Var]) -> Var {
    let mut centers: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    centers.sort_unstable();
    centers.dedup();
    let row = |v: usize| centers.binary_search(&v).unwrap();
    let left: Arc<[usize]> = pairs.iter().map(|&(a, _)| row(a)).collect();
    let right: Arc<[usize]> = pairs.iter().map(|&(_, b)| row(b)).collect();
    let layout = CenterLayout::new(table, &centers).unwrap();
    let features = graph.features().clone();
    let labels: Arc<[f64]> = labels.into();
    let params = params.clone();
    move |tape: &mut Tape, vars: &[Var]| {
        let bound = bound_from_vars(&params, vars);
        let emb = encode_on_tape(tape, &bound, &layout, &features, None).unwrap();
        let z = logits_on_tape(tape, bound.theta, emb, left.clone(), right.clone()).unwrap();
        tape.logistic_loss(z, labels.clone()).unwrap()
    }
}

pub fn param_tensors(params: &ModelParams) -> Vec<Tensor> {
    params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
}

/// The five-node example network: 0 and 1 linked, both linked to 2 and 3,
/// and 2, 3 both linked to 4.
pub fn diamond_graph() -> Graph {
    let edges = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 4), (3, 4)];
    Graph::from_edges(Arc::new(IdMap::sequential(5)), edges, None).unwrap()
}

/// Every edge of `g` as a positive and every non-edge as a negative.
pub fn all_pairs_batch(g: &Graph) -> deeplinker::model::EdgeBatch {
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for a in 0..g.num_nodes() {
        for b in a + 1..g.num_nodes() {
            pairs.push((a, b));
            labels.push(if g.has_edge(a, b) { 1.0 } else { 0.0 });
        }
    }
    deeplinker::model::EdgeBatch::new(pairs, labels).unwrap()
}

/// Per-step losses of full-default-size training on a single batch holding
/// all pairs of the five-node example.
pub fn overfit_losses(attention: AttentionMode, steps: usize, seed: u64) -> Vec<f64> {
    use deeplinker::graph::build_neighbor_table;
    use deeplinker::trainer::{init_params, train_step, AdamState, TrainConfig};

    let g = diamond_graph();
    let mut config = ModelConfig::new(g.features().dim());
    config.attention = attention;
    let table = build_neighbor_table(&g, &g.edges(), config.sample_size, seed).unwrap();
    let mut params = init_params(config, seed).unwrap();
    let mut adam = AdamState::new(&params);
    let train = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let batch = all_pairs_batch(&g);
    (0..steps)
        .map(|_| {
            train_step(&mut params, &mut adam, &train, &table, g.features(), &batch, None).unwrap()
        })
        .collect()
}
