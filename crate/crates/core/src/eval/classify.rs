use std::fmt::Write as _;
use std::path::Path;

use linfa::prelude::*;
use linfa_logistic::MultiLogisticRegression;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::EvalError;
use crate::autodiff::Tensor;
use crate::graph::{FeatureMatrix, GraphError, IdMap, NeighborTable};
use crate::model::{encode, ModelParams};

/// Attempts at drawing a training sample that covers every class.
const MAX_DRAWS: usize = 10;

/// One line per node: its external id followed by its embedding.
pub fn export_embeddings(
    params: &ModelParams,
    table: &NeighborTable,
    features: &FeatureMatrix,
    ids: &IdMap,
) -> Result<String, EvalError> {
    let nodes: Vec<usize> = (0..table.num_nodes()).collect();
    let emb = encode(params, table, features, &nodes)?;
    let mut out = String::new();
    for v in nodes {
        out.push_str(ids.name(v));
        for x in emb.row(v) {
            write!(out, " {x}").expect("writing to a string");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, contents: &str) -> Result<(), GraphError> {
    std::fs::write(path, contents).map_err(|source| GraphError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Parses an embedding file into ids (in file order) and a matrix.
pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Tensor), GraphError> {
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| GraphError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let mut toks = line.split_whitespace();
        let id = toks.next().expect("non-empty line");
        let row = toks
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad value {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if row.is_empty() || row.iter().any(|v| !v.is_finite()) {
            return Err(err("expected finite embedding values".into()));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(err(format!("{} values, expected {w}", row.len())))
            }
            _ => {}
        }
        ids.push(id.to_owned());
        data.extend(row);
    }
    let width = width.ok_or_else(|| GraphError::Validation("embedding file is empty".into()))?;
    let t = Tensor::from_vec(ids.len(), width, data).expect("rows are uniform");
    Ok((ids, t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyConfig {
    pub fractions: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    /// L2 penalty of the logistic regression.
    pub alpha: f64,
    pub tolerance: f64,
    pub max_iterations: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.01, 0.03, 0.05, 0.07, 0.09],
            repeats: 10,
            seed: 0,
            alpha: 1.0,
            tolerance: 1e-6,
            max_iterations: 1000,
        }
    }
}

/// Stratified training sample: each class contributes its fractional share,
/// rounded randomly so the expected size is exact. Fails when a class ends
/// up with no training nodes.
fn stratified_draw(by_class: &[Vec<usize>], fraction: f64, rng: &mut ChaCha8Rng) -> Option<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in by_class {
        let mut m = members.clone();
        m.shuffle(rng);
        let exact = fraction * m.len() as f64;
        let mut k = exact.floor() as usize;
        if rng.gen::<f64>() < exact - exact.floor() {
            k += 1;
        }
        if k == 0 {
            return None;
        }
        train.extend_from_slice(&m[..k]);
        test.extend_from_slice(&m[k..]);
    }
    Some((train, test))
}

fn rows_of(emb: &Tensor, nodes: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((nodes.len(), emb.cols()));
    for (i, &v) in nodes.iter().enumerate() {
        out.row_mut(i).iter_mut().zip(emb.row(v)).for_each(|(o, &x)| *o = x);
    }
    out
}

fn one_run(
    emb: &Tensor,
    labels: &[usize],
    by_class: &[Vec<usize>],
    fraction: f64,
    config: &ClassifyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, EvalError> {
    let mut drawn = None;
    for attempt in 1..=MAX_DRAWS {
        match stratified_draw(by_class, fraction, rng) {
            Some(d) => {
                drawn = Some(d);
                break;
            }
            None => log::warn!(
                "training fraction {fraction}: a class got no training nodes (attempt {attempt}); resampling"
            ),
        }
    }
    let (train, test) = drawn.ok_or(EvalError::MissingClass(MAX_DRAWS))?;
    if test.is_empty() {
        return Err(EvalError::Invalid(format!("fraction {fraction} leaves no test nodes")));
    }
    let targets: Array1<usize> = train.iter().map(|&v| labels[v]).collect();
    let dataset = Dataset::new(rows_of(emb, &train), targets);
    let model = MultiLogisticRegression::default()
        .alpha(config.alpha)
        .gradient_tolerance(config.tolerance)
        .max_iterations(config.max_iterations)
        .fit(&dataset)
        .map_err(|e| EvalError::Classifier(e.to_string()))?;
    let predicted = model.predict(&rows_of(emb, &test));
    let correct = predicted
        .iter()
        .zip(&test)
        .filter(|&(&p, &v)| p == labels[v])
        .count();
    // Single-label multi-class: micro-averaged F1 equals accuracy.
    Ok(correct as f64 / test.len() as f64)
}

/// Mean Micro-F1 of a logistic-regression classifier on `embeddings` for
/// each training fraction, over `config.repeats` stratified draws.
pub fn classify_eval(
    embeddings: &Tensor,
    labels: &[usize],
    config: &ClassifyConfig,
) -> Result<Vec<(f64, f64)>, EvalError> {
    if labels.len() != embeddings.rows() {
        return Err(EvalError::Invalid(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    if config.repeats == 0 {
        return Err(EvalError::Invalid("repeats must be positive".into()));
    }
    if let Some(f) = config.fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(EvalError::Invalid(format!("training fraction {f} outside (0, 1)")));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (v, &c) in labels.iter().enumerate() {
        by_class[c].push(v);
    }
    by_class.retain(|m| !m.is_empty());
    if by_class.len() < 2 {
        return Err(EvalError::Invalid("labels must cover at least two classes".into()));
    }
    config
        .fractions
        .iter()
        .enumerate()
        .map(|(fi, &fraction)| {
            let scores = (0..config.repeats)
                .into_par_iter()
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream((fi * config.repeats + r) as u64);
                    one_run(embeddings, labels, &by_class, fraction, config, &mut rng)
                })
                .collect::<Result<Vec<f64>, _>>()?;
            Ok((fraction, scores.iter().sum::<f64>() / scores.len() as f64))
        })
        .collect()
}
