//! The link-prediction network: two attention layers over frozen
//! neighborhoods, a Hadamard edge decoder and a logistic scorer.

mod checkpoint;
mod encoder;
mod layer;

use thiserror::Error;

use crate::autodiff::{EngineError, Tape, Tensor, Var};

pub use checkpoint::Checkpoint;
pub use encoder::{
    encode, encode_on_tape, full_neighborhood_attention, logits_on_tape, score_on_tape, score_pairs, CenterLayout,
    LayerAttention,
};
pub use layer::{
    attention_coefficients, layer_forward, Activation, Dropout, LayerInput, Neighborhoods,
};

/// Negative slope of the LeakyReLU inside attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("node {node} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("configuration mismatch: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Learned,
    AllOnes,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Learned => "learned",
            AttentionMode::AllOnes => "all_ones",
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned" => Ok(AttentionMode::Learned),
            "all_ones" => Ok(AttentionMode::AllOnes),
            other => Err(format!("unknown attention mode {other:?} (expected learned or all_ones)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMerge {
    Concat,
    Average,
}

/// Shape of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input attribute count `F`.
    pub in_dim: usize,
    /// Heads in the first layer, concatenated.
    pub heads1: usize,
    /// Per-head output width of the first layer.
    pub hidden: usize,
    /// Heads in the second layer, averaged.
    pub heads2: usize,
    /// Embedding width `d` produced by the second layer.
    pub embed_dim: usize,
    /// Neighbors sampled per node at each hop.
    pub sample_size: usize,
    pub attention: AttentionMode,
}

impl ModelConfig {
    /// Defaults for one-hot or attribute inputs of width `in_dim`.
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            heads1: 8,
            hidden: 32,
            heads2: 1,
            embed_dim: 128,
            sample_size: 20,
            attention: AttentionMode::AllOnes,
        }
    }

    pub fn layer2_in_dim(&self) -> usize {
        self.heads1 * self.hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("in_dim", self.in_dim),
            ("heads1", self.heads1),
            ("hidden", self.hidden),
            ("heads2", self.heads2),
            ("embed_dim", self.embed_dim),
            ("sample_size", self.sample_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One attention layer. `weights[k]` maps inputs to head `k`'s output and is
/// stored input-major (`in x out`); `attention[k]` is the `2*out x 1`
/// vector scoring `[center || neighbor]`. No attention vectors means every
/// coefficient is fixed to one.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<Tensor>,
    pub attention: Option<Vec<Tensor>>,
    pub merge: HeadMerge,
}

impl LayerParams {
    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn head_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn out_dim(&self) -> usize {
        match self.merge {
            HeadMerge::Concat => self.heads() * self.head_dim(),
            HeadMerge::Average => self.head_dim(),
        }
    }

    pub fn mode(&self) -> AttentionMode {
        if self.attention.is_some() {
            AttentionMode::Learned
        } else {
            AttentionMode::AllOnes
        }
    }

    fn check(&self, name: &str) -> Result<(), ModelError> {
        let Some(first) = self.weights.first() else {
            return Err(ModelError::Config(format!("{name} has no heads")));
        };
        if self.weights.iter().any(|w| w.shape() != first.shape()) {
            return Err(ModelError::Config(format!("{name} heads disagree on shape")));
        }
        if let Some(att) = &self.attention {
            if att.len() != self.weights.len()
                || att.iter().any(|a| a.shape() != (2 * first.cols(), 1))
            {
                return Err(ModelError::Config(format!(
                    "{name} attention vectors must be {}x1, one per head",
                    2 * first.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundLayer, ModelError> {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let weights = self.weights.iter().map(&mut leaf).collect::<Result<Vec<_>, _>>()?;
        let attention = match &self.attention {
            Some(a) => Some(a.iter().map(&mut leaf).collect::<Result<Vec<_>, _>>()?),
            None => None,
        };
        Ok(BoundLayer {
            weights,
            attention,
            merge: self.merge,
        })
    }
}

/// A layer's parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub weights: Vec<Var>,
    pub attention: Option<Vec<Var>>,
    pub merge: HeadMerge,
}

impl BoundLayer {
    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.weights
            .iter()
            .chain(self.attention.iter().flatten())
            .copied()
    }
}

/// All trainable tensors of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layer1: LayerParams,
    pub layer2: LayerParams,
    /// Scorer weights, `d x 1`.
    pub theta: Tensor,
}

/// [`ModelParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub layer1: BoundLayer,
    pub layer2: BoundLayer,
    pub theta: Var,
}

impl BoundParams {
    /// Vars in the same order as [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layer1.vars().collect();
        out.extend(self.layer2.vars());
        out.push(self.theta);
        out
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = &self.config;
        c.validate()?;
        self.layer1.check("layer1")?;
        self.layer2.check("layer2")?;
        let expect = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(ModelError::Config(format!("{what} is {got:?}, expected {want:?}")))
            }
        };
        expect("layer1 weight", self.layer1.weights[0].shape(), (c.in_dim, c.hidden))?;
        expect(
            "layer2 weight",
            self.layer2.weights[0].shape(),
            (c.layer2_in_dim(), c.embed_dim),
        )?;
        expect("theta", self.theta.shape(), (c.embed_dim, 1))?;
        if self.layer1.heads() != c.heads1 || self.layer2.heads() != c.heads2 {
            return Err(ModelError::Config("head counts disagree with config".into()));
        }
        if self.layer1.merge != HeadMerge::Concat || self.layer2.merge != HeadMerge::Average {
            return Err(ModelError::Config(
                "layer1 must concatenate heads and layer2 must average them".into(),
            ));
        }
        for layer in [&self.layer1, &self.layer2] {
            if layer.mode() != c.attention {
                return Err(ModelError::Config(
                    "attention vectors disagree with the attention mode".into(),
                ));
            }
        }
        Ok(())
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (lname, layer) in [("layer1", &self.layer1), ("layer2", &self.layer2)] {
            for (k, w) in layer.weights.iter().enumerate() {
                out.push((format!("{lname}.head{k}.weight"), w));
            }
            for (k, a) in layer.attention.iter().flatten().enumerate() {
                out.push((format!("{lname}.head{k}.attention"), a));
            }
        }
        out.push(("theta".to_owned(), &self.theta));
        out
    }

    /// Mutable tensors in [`Self::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in [&mut self.layer1, &mut self.layer2] {
            out.extend(layer.weights.iter_mut());
            out.extend(layer.attention.iter_mut().flatten());
        }
        out.push(&mut self.theta);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams, ModelError> {
        let layer1 = self.layer1.bind(tape, trainable)?;
        let layer2 = self.layer2.bind(tape, trainable)?;
        let theta = if trainable {
            tape.param(self.theta.clone())?
        } else {
            tape.constant(self.theta.clone())?
        };
        Ok(BoundParams {
            layer1,
            layer2,
            theta,
        })
    }
}

/// Labeled node pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeBatch {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<f64>,
}

impl EdgeBatch {
    pub fn new(pairs: Vec<(usize, usize)>, labels: Vec<f64>) -> Result<Self, ModelError> {
        if pairs.len() != labels.len() {
            return Err(ModelError::Config(format!(
                "{} pairs but {} labels",
                pairs.len(),
                labels.len()
            )));
        }
        Ok(Self { pairs, labels })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Link probability from two embeddings: the logistic of
/// `(emb_i ⊙ emb_j) · theta`.
pub fn edge_score(theta: &Tensor, emb_i: &[f64], emb_j: &[f64]) -> Result<f64, ModelError> {
    if emb_i.len() != emb_j.len() || emb_i.len() != theta.len() {
        return Err(ModelError::Config(format!(
            "embedding widths {} and {} against theta of {}",
            emb_i.len(),
            emb_j.len(),
            theta.len()
        )));
    }
    let logit: f64 = emb_i
        .iter()
        .zip(emb_j)
        .zip(theta.data())
        .map(|((a, b), t)| a * b * t)
        .sum();
    Ok(crate::autodiff::sigmoid(logit))
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn batch_loss(batch: &EdgeBatch, probabilities: &[f64]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if probabilities.len() != batch.len() {
        return Err(ModelError::Config(format!(
            "{} probabilities for {} pairs",
            probabilities.len(),
            batch.len()
        )));
    }
    let eps = crate::autodiff::PROB_CLAMP;
    let total: f64 = batch
        .labels
        .iter()
        .zip(probabilities)
        .map(|(&y, &p)| {
            let p = p.clamp(eps, 1.0 - eps);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / batch.len() as f64)
}
