//! Measurement: link-prediction metrics, centralities and ranking metrics,
//! embedding export and the node-classification harness.

mod centrality;
mod classify;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Edge, GraphError};
use crate::model::ModelError;

pub use centrality::{
    attention_rank, betweenness, closeness, degree, hit_accuracy, load_binary_truth, load_real_truth,
    pagerank, spearman, spearman_against, CentralityVector, GroundTruth,
};
pub use classify::{
    classify_eval, export_embeddings, read_embeddings, write_embeddings, ClassifyConfig,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("AUC needs both positive and negative examples")]
    SingleClass,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("k = {k} exceeds the {nodes} ranked nodes")]
    TopKTooLarge { k: usize, nodes: usize },
    #[error("attention rank needs a model trained with learned attention")]
    AllOnesAttention,
    #[error("could not draw a training set containing every class after {0} attempts")]
    MissingClass(usize),
    #[error("classifier: {0}")]
    Classifier(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Predicted link probabilities with their true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredEdges {
    pub pairs: Vec<Edge>,
    pub probabilities: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredEdges {
    pub fn new(pairs: Vec<Edge>, probabilities: Vec<f64>, labels: Vec<bool>) -> Result<Self, EvalError> {
        if pairs.len() != probabilities.len() || pairs.len() != labels.len() {
            return Err(EvalError::Invalid(format!(
                "{} pairs, {} probabilities, {} labels",
                pairs.len(),
                probabilities.len(),
                labels.len()
            )));
        }
        if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(EvalError::Invalid(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            pairs,
            probabilities,
            labels,
        })
    }

    /// Scores without pair identities, for metric checks.
    pub fn from_scores(probabilities: Vec<f64>, labels: Vec<bool>) -> Result<Self, EvalError> {
        let pairs = vec![(0, 0); probabilities.len()];
        Self::new(pairs, probabilities, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Fraction of pairs where `p >= threshold` agrees with the label.
pub fn accuracy(s: &ScoredEdges, threshold: f64) -> Result<f64, EvalError> {
    if s.is_empty() {
        return Err(EvalError::Empty("scored edge set"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvalError::Invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let hits = s
        .probabilities
        .iter()
        .zip(&s.labels)
        .filter(|&(&p, &y)| (p >= threshold) == y)
        .count();
    Ok(hits as f64 / s.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from sorted scores with tied runs sharing
/// their average rank.
pub fn auc(s: &ScoredEdges) -> Result<f64, EvalError> {
    let n_pos = s.labels.iter().filter(|&&y| y).count();
    let n_neg = s.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.probabilities[a].total_cmp(&s.probabilities[b]));
    // Count, over positives, the negatives strictly below plus half the tied
    // negatives. Integer half-units keep the result exact.
    let mut half_units: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let v = s.probabilities[order[i]];
        while j < order.len() && s.probabilities[order[j]] == v {
            j += 1;
        }
        let run = &order[i..j];
        let pos = run.iter().filter(|&&k| s.labels[k]).count() as u128;
        let neg = run.len() as u128 - pos;
        half_units += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Ok(half_units as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Everything an evaluation run reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub centrality: BTreeMap<String, RankingScores>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub micro_f1: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
