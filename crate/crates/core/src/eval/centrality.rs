use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rayon::prelude::*;

use super::EvalError;
use crate::graph::{Graph, GraphError, IdMap};
use crate::model::{full_neighborhood_attention, AttentionMode, ModelParams};

/// Betweenness sources handled per parallel task; partial sums are merged
/// in task order so results do not depend on the thread count.
const SOURCE_CHUNK: usize = 32;

/// A score per node from a named method.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralityVector {
    pub method: String,
    pub scores: Vec<f64>,
}

impl CentralityVector {
    fn new(method: &str, scores: Vec<f64>) -> Self {
        Self {
            method: method.to_owned(),
            scores,
        }
    }

    /// Node ids ordered by descending score, ties by ascending id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }
}

/// Reference importance of nodes.
#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    /// A set of important nodes.
    Binary(BTreeSet<usize>),
    /// A real-valued score for some nodes.
    Real(Vec<(usize, f64)>),
}

fn truth_lines<'a>(
    text: &'a str,
) -> impl Iterator<Item = (usize, Vec<&'a str>)> + 'a {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split_whitespace().collect()))
}

fn read(path: &Path) -> Result<String, GraphError> {
    std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_owned(),
        source,
    })
}

fn lookup(ids: &IdMap, path: &Path, line: usize, id: &str) -> Result<usize, GraphError> {
    ids.get(id).ok_or_else(|| GraphError::UnknownNode {
        path: path.to_owned(),
        line,
        id: id.to_owned(),
    })
}

/// One node id per line.
pub fn load_binary_truth(path: &Path, ids: &IdMap) -> Result<GroundTruth, GraphError> {
    let text = read(path)?;
    let mut set = BTreeSet::new();
    for (line, toks) in truth_lines(&text) {
        if toks.len() != 1 {
            return Err(GraphError::Parse {
                path: path.to_owned(),
                line,
                message: "expected a single node id".into(),
            });
        }
        set.insert(lookup(ids, path, line, toks[0])?);
    }
    Ok(GroundTruth::Binary(set))
}

/// `node_id value` per line.
pub fn load_real_truth(path: &Path, ids: &IdMap) -> Result<GroundTruth, GraphError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (line, toks) in truth_lines(&text) {
        let parse_err = |message: String| GraphError::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        if toks.len() != 2 {
            return Err(parse_err("expected `node_id value`".into()));
        }
        let node = lookup(ids, path, line, toks[0])?;
        let value: f64 = toks[1]
            .parse()
            .map_err(|_| parse_err(format!("bad value {:?}", toks[1])))?;
        if !value.is_finite() {
            return Err(parse_err("value must be finite".into()));
        }
        out.push((node, value));
    }
    Ok(GroundTruth::Real(out))
}

/// Sum of the second-layer attention each node receives from its
/// neighbors, across heads, with every neighborhood taken in full from
/// `train_graph`.
pub fn attention_rank(params: &ModelParams, train_graph: &Graph) -> Result<CentralityVector, EvalError> {
    if params.config.attention == AttentionMode::AllOnes {
        return Err(EvalError::AllOnesAttention);
    }
    let att = full_neighborhood_attention(params, train_graph, train_graph.features())?;
    let mut scores = vec![0.0; train_graph.num_nodes()];
    for head in &att.heads {
        for (&node, &alpha) in att.segments.sources().iter().zip(head) {
            scores[node] += alpha;
        }
    }
    Ok(CentralityVector::new("attention", scores))
}

/// Number of neighbors of each node.
pub fn degree(g: &Graph) -> CentralityVector {
    let scores = (0..g.num_nodes()).map(|v| g.degree(v) as f64).collect();
    CentralityVector::new("degree", scores)
}

/// PageRank with uniform teleportation; isolated nodes spread their mass
/// uniformly. Iterates until the L1 change drops below `tol`.
pub fn pagerank(g: &Graph, damping: f64, tol: f64) -> CentralityVector {
    let n = g.num_nodes();
    if n == 0 {
        return CentralityVector::new("pagerank", Vec::new());
    }
    let nf = n as f64;
    let mut rank = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    for _ in 0..100_000 {
        let dangling: f64 = (0..n).filter(|&v| g.degree(v) == 0).map(|v| rank[v]).sum();
        let base = (1.0 - damping) / nf + damping * dangling / nf;
        next.iter_mut().for_each(|x| *x = base);
        for v in 0..n {
            let d = g.degree(v);
            if d > 0 {
                let share = damping * rank[v] / d as f64;
                for &u in g.neighbors(v) {
                    next[u] += share;
                }
            }
        }
        let change: f64 = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if change < tol {
            break;
        }
    }
    CentralityVector::new("pagerank", rank)
}

fn bfs_distances(g: &Graph, source: usize, dist: &mut [usize], queue: &mut VecDeque<usize>) {
    dist.iter_mut().for_each(|d| *d = usize::MAX);
    dist[source] = 0;
    queue.clear();
    queue.push_back(source);
    while let Some(v) = queue.pop_front() {
        for &u in g.neighbors(v) {
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
}

/// Closeness within each node's connected component:
/// `(reachable - 1) / sum of distances`, zero for isolated nodes.
pub fn closeness(g: &Graph) -> CentralityVector {
    let n = g.num_nodes();
    let scores = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0; n], VecDeque::new()),
            |(dist, queue), v| {
                bfs_distances(g, v, dist, queue);
                let (reached, total) = dist
                    .iter()
                    .filter(|&&d| d != usize::MAX)
                    .fold((0usize, 0usize), |(c, s), &d| (c + 1, s + d));
                if total == 0 {
                    0.0
                } else {
                    (reached - 1) as f64 / total as f64
                }
            },
        )
        .collect();
    CentralityVector::new("closeness", scores)
}

/// Exact unnormalized betweenness (Brandes), each unordered pair counted
/// once.
pub fn betweenness(g: &Graph) -> CentralityVector {
    let n = g.num_nodes();
    let sources: Vec<usize> = (0..n).collect();
    let partials: Vec<Vec<f64>> = sources
        .par_chunks(SOURCE_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; n];
            let mut sigma = vec![0.0f64; n];
            let mut dist = vec![usize::MAX; n];
            let mut delta = vec![0.0; n];
            let mut stack = Vec::with_capacity(n);
            let mut queue = VecDeque::new();
            for &s in chunk {
                sigma.iter_mut().for_each(|x| *x = 0.0);
                dist.iter_mut().for_each(|x| *x = usize::MAX);
                delta.iter_mut().for_each(|x| *x = 0.0);
                stack.clear();
                sigma[s] = 1.0;
                dist[s] = 0;
                queue.push_back(s);
                while let Some(v) = queue.pop_front() {
                    stack.push(v);
                    for &w in g.neighbors(v) {
                        if dist[w] == usize::MAX {
                            dist[w] = dist[v] + 1;
                            queue.push_back(w);
                        }
                        if dist[w] == dist[v] + 1 {
                            sigma[w] += sigma[v];
                        }
                    }
                }
                while let Some(w) = stack.pop() {
                    for &v in g.neighbors(w) {
                        if dist[v] != usize::MAX && dist[v] + 1 == dist[w] {
                            delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
                        }
                    }
                    if w != s {
                        acc[w] += delta[w];
                    }
                }
            }
            acc
        })
        .collect();
    let mut scores = vec![0.0; n];
    for p in partials {
        for (s, v) in scores.iter_mut().zip(p) {
            *s += v;
        }
    }
    scores.iter_mut().for_each(|s| *s /= 2.0);
    CentralityVector::new("betweenness", scores)
}

/// Share of the top `k` nodes (ties by ascending id) found in `truth`.
pub fn hit_accuracy(c: &CentralityVector, truth: &BTreeSet<usize>, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::Invalid("k must be positive".into()));
    }
    if k > c.scores.len() {
        return Err(EvalError::TopKTooLarge {
            k,
            nodes: c.scores.len(),
        });
    }
    let hits = c.ranking()[..k].iter().filter(|v| truth.contains(v)).count();
    Ok(hits as f64 / k as f64)
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Rank correlation: the Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Invalid(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(EvalError::Invalid("need at least two values".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::Invalid("values must be finite".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 {
        return Err(EvalError::ZeroVariance("first ranking"));
    }
    if vb == 0.0 {
        return Err(EvalError::ZeroVariance("second ranking"));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation between `c` and real-valued truth, over the nodes
/// the truth covers.
pub fn spearman_against(c: &CentralityVector, truth: &[(usize, f64)]) -> Result<f64, EvalError> {
    if let Some(&(v, _)) = truth.iter().find(|&&(v, _)| v >= c.scores.len()) {
        return Err(EvalError::Invalid(format!("truth node {v} out of range")));
    }
    let ours: Vec<f64> = truth.iter().map(|&(v, _)| c.scores[v]).collect();
    let theirs: Vec<f64> = truth.iter().map(|&(_, s)| s).collect();
    spearman(&ours, &theirs)
}
