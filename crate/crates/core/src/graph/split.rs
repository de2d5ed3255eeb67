use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{canonical, io_err, Edge, Graph, GraphError};

/// Train/validation/test partition of the edges plus matching negatives.
///
/// Training negatives are only the initial draw; the trainer resamples them
/// every epoch. Validation and test negatives are fixed here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub seed: u64,
    pub test_frac: f64,
    pub val_frac: f64,
    pub num_nodes: usize,
    pub train_pos: Vec<Edge>,
    pub train_neg: Vec<Edge>,
    pub val_pos: Vec<Edge>,
    pub val_neg: Vec<Edge>,
    pub test_pos: Vec<Edge>,
    pub test_neg: Vec<Edge>,
}

impl EdgeSplit {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("split serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), GraphError> {
        fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, GraphError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| GraphError::SplitFormat(e.to_string()))
    }

    /// Checks that the split describes `g`: positives partition the edge set
    /// and negatives are non-edges.
    pub fn validate_against(&self, g: &Graph) -> Result<(), GraphError> {
        if self.num_nodes != g.num_nodes() {
            return Err(GraphError::SplitFormat(format!(
                "split covers {} nodes but the graph has {}",
                self.num_nodes,
                g.num_nodes()
            )));
        }
        let n = g.num_nodes();
        let in_range = |e: &Edge| e.0 < n && e.1 < n;
        let mut seen = HashSet::new();
        for &e in self.train_pos.iter().chain(&self.val_pos).chain(&self.test_pos) {
            if !in_range(&e) || !g.has_edge(e.0, e.1) {
                return Err(GraphError::SplitFormat(format!(
                    "positive pair {e:?} is not an edge of the graph"
                )));
            }
            if !seen.insert(canonical(e.0, e.1)) {
                return Err(GraphError::SplitFormat(format!("positive pair {e:?} repeats")));
            }
        }
        if seen.len() != g.num_edges() {
            return Err(GraphError::SplitFormat(format!(
                "positives cover {} of {} edges",
                seen.len(),
                g.num_edges()
            )));
        }
        for &e in self.train_neg.iter().chain(&self.val_neg).chain(&self.test_neg) {
            if !in_range(&e) || e.0 == e.1 || g.has_edge(e.0, e.1) {
                return Err(GraphError::SplitFormat(format!(
                    "negative pair {e:?} is an edge, a self-pair or out of range"
                )));
            }
        }
        Ok(())
    }
}

fn check_fraction(name: &str, f: f64) -> Result<(), GraphError> {
    if !(0.0..1.0).contains(&f) {
        return Err(GraphError::Fraction(format!("{name} = {f} is outside [0, 1)")));
    }
    Ok(())
}

/// Nodes touched by `edges`, ascending.
fn endpoints(edges: &[Edge]) -> Vec<usize> {
    let mut nodes: Vec<usize> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Draws node pairs that are not edges of a reference graph.
///
/// Both endpoints come from a fixed node pool; pairs in `excluded` (and
/// pairs already drawn in the same call) are never returned.
pub struct NegativeSampler<'g> {
    graph: &'g Graph,
    pool: Vec<usize>,
    excluded: HashSet<Edge>,
}

impl<'g> NegativeSampler<'g> {
    pub fn new(graph: &'g Graph, pool_from: &[Edge]) -> Self {
        Self {
            graph,
            pool: endpoints(pool_from),
            excluded: HashSet::new(),
        }
    }

    pub fn exclude(&mut self, pairs: &[Edge]) {
        self.excluded
            .extend(pairs.iter().map(|&(a, b)| canonical(a, b)));
    }

    fn admissible(&self, a: usize, b: usize) -> bool {
        a != b && !self.graph.has_edge(a, b) && !self.excluded.contains(&canonical(a, b))
    }

    /// Number of distinct pairs this sampler could ever return.
    pub fn capacity(&self) -> usize {
        let n = self.pool.len();
        let mut in_pool = vec![false; self.graph.num_nodes()];
        for &v in &self.pool {
            in_pool[v] = true;
        }
        let edges_inside = self
            .graph
            .edges()
            .iter()
            .filter(|&&(a, b)| in_pool[a] && in_pool[b])
            .count();
        let excluded_inside = self
            .excluded
            .iter()
            .filter(|&&(a, b)| a != b && in_pool[a] && in_pool[b] && !self.graph.has_edge(a, b))
            .count();
        (n * n.saturating_sub(1) / 2) - edges_inside - excluded_inside
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<Edge>, GraphError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let available = self.capacity();
        if available < count {
            return Err(GraphError::TooDense {
                needed: count,
                available,
            });
        }
        if available < 2 * count {
            // Rejection sampling would stall; enumerate instead.
            let mut all = Vec::with_capacity(available);
            for (i, &a) in self.pool.iter().enumerate() {
                for &b in &self.pool[i + 1..] {
                    if self.admissible(a, b) {
                        all.push((a, b));
                    }
                }
            }
            let (picked, _) = all.partial_shuffle(rng, count);
            return Ok(picked.to_vec());
        }
        let mut chosen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let a = self.pool[rng.gen_range(0..self.pool.len())];
            let b = self.pool[rng.gen_range(0..self.pool.len())];
            if self.admissible(a, b) && chosen.insert(canonical(a, b)) {
                out.push(canonical(a, b));
            }
        }
        Ok(out)
    }
}

/// Uniformly partitions the edges of `g` into train/validation/test and
/// draws an equal number of negatives for each part.
pub fn split_edges(
    g: &Graph,
    test_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<EdgeSplit, GraphError> {
    check_fraction("test_frac", test_frac)?;
    check_fraction("val_frac", val_frac)?;
    let held = test_frac + val_frac;
    if !(held > 0.0 && held < 1.0) {
        return Err(GraphError::Fraction(format!(
            "test_frac + val_frac = {held} must lie strictly between 0 and 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = g.edges();
    edges.shuffle(&mut rng);

    let total = edges.len();
    let n_test = (test_frac * total as f64).floor() as usize;
    let n_val = (val_frac * total as f64).floor() as usize;
    if test_frac > 0.0 && n_test == 0 {
        return Err(GraphError::EmptySplit("test"));
    }
    if val_frac > 0.0 && n_val == 0 {
        return Err(GraphError::EmptySplit("validation"));
    }
    if n_test + n_val >= total {
        return Err(GraphError::EmptySplit("training"));
    }
    let test_pos = edges[..n_test].to_vec();
    let val_pos = edges[n_test..n_test + n_val].to_vec();
    let train_pos = edges[n_test + n_val..].to_vec();

    let mut drawn: Vec<Edge> = Vec::new();
    let mut negatives_for = |positives: &[Edge], rng: &mut ChaCha8Rng| {
        let mut sampler = NegativeSampler::new(g, positives);
        sampler.exclude(&drawn);
        let neg = sampler.sample(positives.len(), rng)?;
        drawn.extend_from_slice(&neg);
        Ok::<_, GraphError>(neg)
    };
    let test_neg = negatives_for(&test_pos, &mut rng)?;
    let val_neg = negatives_for(&val_pos, &mut rng)?;
    let train_neg = negatives_for(&train_pos, &mut rng)?;

    Ok(EdgeSplit {
        seed,
        test_frac,
        val_frac,
        num_nodes: g.num_nodes(),
        train_pos,
        train_neg,
        val_pos,
        val_neg,
        test_pos,
        test_neg,
    })
}

/// Copy of `g` with `floor(fraction * |E|)` uniformly chosen edges removed.
pub fn remove_edges(g: &Graph, fraction: f64, seed: u64) -> Result<Graph, GraphError> {
    check_fraction("fraction", fraction)?;
    let mut edges = g.edges();
    let k = (fraction * edges.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    g.with_edges(edges[k..].iter().copied())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::graph::IdMap;

    fn cycle(n: usize) -> Graph {
        let ids = Arc::new(IdMap::sequential(n));
        Graph::from_edges(ids, (0..n).map(|i| (i, (i + 1) % n)), None).unwrap()
    }

    #[test]
    fn hundred_edges_ten_percent_test() {
        let g = cycle(100);
        let s = split_edges(&g, 0.10, 0.05, 7).unwrap();
        assert_eq!(s.test_pos.len(), 10);
        assert_eq!(s.test_neg.len(), 10);
        assert_eq!(s.val_pos.len(), 5);
        assert_eq!(s.val_neg.len(), 5);
        assert_eq!(s.train_pos.len() + s.val_pos.len() + s.test_pos.len(), 100);
        s.validate_against(&g).unwrap();
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let ids = Arc::new(IdMap::sequential(3));
        let g = Graph::from_edges(ids, [(0, 1)], None).unwrap();
        assert!(matches!(
            split_edges(&g, 0.10, 0.0, 1),
            Err(GraphError::EmptySplit("test"))
        ));
    }

    #[test]
    fn fractions_out_of_range_are_rejected() {
        let g = cycle(20);
        assert!(matches!(split_edges(&g, 0.0, 0.0, 1), Err(GraphError::Fraction(_))));
        assert!(matches!(split_edges(&g, 0.6, 0.5, 1), Err(GraphError::Fraction(_))));
        assert!(matches!(split_edges(&g, -0.1, 0.2, 1), Err(GraphError::Fraction(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let g = cycle(60);
        let a = split_edges(&g, 0.1, 0.1, 42).unwrap();
        let b = split_edges(&g, 0.1, 0.1, 42).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = split_edges(&g, 0.1, 0.1, 43).unwrap();
        assert_ne!(a.test_pos, c.test_pos);
    }

    #[test]
    fn dense_graph_cannot_supply_negatives() {
        // K4 has no non-edges at all.
        let ids = Arc::new(IdMap::sequential(4));
        let edges: Vec<Edge> = (0..4).flat_map(|a| (a + 1..4).map(move |b| (a, b))).collect();
        let g = Graph::from_edges(ids, edges, None).unwrap();
        assert!(matches!(
            split_edges(&g, 0.5, 0.0, 3),
            Err(GraphError::TooDense { .. })
        ));
    }

    #[test]
    fn near_dense_pool_uses_enumeration() {
        // K5 minus two edges leaves exactly two non-edges.
        let ids = Arc::new(IdMap::sequential(5));
        let edges: Vec<Edge> = (0..5)
            .flat_map(|a| (a + 1..5).map(move |b| (a, b)))
            .filter(|&e| e != (0, 1) && e != (2, 3))
            .collect();
        let g = Graph::from_edges(ids, edges.clone(), None).unwrap();
        let sampler = NegativeSampler::new(&g, &edges);
        assert_eq!(sampler.capacity(), 2);
        let mut neg = sampler.sample(2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        neg.sort();
        assert_eq!(neg, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn remove_edges_floor_rule() {
        let ids = Arc::new(IdMap::sequential(3));
        let g = Graph::from_edges(ids, [(0, 1), (1, 2)], None).unwrap();
        let h = remove_edges(&g, 0.5, 9).unwrap();
        assert_eq!(h.num_edges(), 1);
        assert_eq!(g.num_edges(), 2);
        let same = remove_edges(&g, 0.0, 9).unwrap();
        assert_eq!(same.edges(), g.edges());
    }

    #[test]
    fn split_json_round_trips() {
        let g = cycle(30);
        let s = split_edges(&g, 0.1, 0.1, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        s.write(&p).unwrap();
        assert_eq!(EdgeSplit::read(&p).unwrap(), s);
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert!(v["test_pos"][0].is_array());
    }
}
