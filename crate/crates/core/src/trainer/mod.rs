//! Mini-batch training: initialization, Adam, per-epoch negative resampling
//! and early stopping on validation accuracy.

mod optim;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::eval::{accuracy, auc, ScoredEdges};
use crate::graph::{Edge, FeatureMatrix, Graph, GraphError, NeighborTable, NegativeSampler, EdgeSplit};
use crate::model::{
    encode_on_tape, logits_on_tape, score_pairs, AttentionMode, CenterLayout, Checkpoint, Dropout,
    EdgeBatch, HeadMerge, LayerParams, ModelConfig, ModelError, ModelParams,
};

pub use optim::{adam_step, AdamState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error(transparent)]
    Metric(#[from] crate::eval::EvalError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Inverted-dropout rate on attention coefficients and hidden units.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 32,
            max_epochs: 2000,
            patience: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("Adam epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Uniform samples on `(-b, b)` with `b = sqrt(6 / (rows + cols))`.
pub fn glorot_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    assert!(rows >= 1 && cols >= 1, "glorot_init needs a non-empty shape");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| loop {
            let v = rng.gen_range(-bound..bound);
            // gen_range includes the lower end; keep the interval open.
            if v != -bound {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

/// Glorot-initialized parameters, deterministic in `seed`.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learned = config.attention == AttentionMode::Learned;
    let layer = |rng: &mut ChaCha8Rng, heads: usize, input: usize, out: usize, merge| {
        let weights = (0..heads).map(|_| glorot_init(input, out, rng)).collect();
        let attention =
            learned.then(|| (0..heads).map(|_| glorot_init(2 * out, 1, rng)).collect());
        LayerParams {
            weights,
            attention,
            merge,
        }
    };
    let layer1 = layer(&mut rng, config.heads1, config.in_dim, config.hidden, HeadMerge::Concat);
    let layer2 = layer(
        &mut rng,
        config.heads2,
        config.layer2_in_dim(),
        config.embed_dim,
        HeadMerge::Average,
    );
    let theta = glorot_init(config.embed_dim, 1, &mut rng);
    let params = ModelParams {
        config,
        layer1,
        layer2,
        theta,
    };
    params.validate()?;
    Ok(params)
}

/// Metrics recorded after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch number (1-based) of the best validation accuracy.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| ModelError::Io {
            path: path.to_owned(),
            source,
        })
    }
}

/// Tracks the best validation score; only a strict improvement resets the
/// patience counter.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch's score and returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, best)) if score <= best => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// The graph message passing may use: the nodes of `g` with only the
/// training positives as edges. One-hot features follow this adjacency, so
/// held-out edges never leak into inputs.
pub fn training_graph(g: &Graph, split: &EdgeSplit) -> Result<Graph, GraphError> {
    g.with_edges(split.train_pos.iter().copied())
}

fn labeled(pos: &[Edge], neg: &[Edge]) -> Vec<(Edge, f64)> {
    pos.iter()
        .map(|&e| (e, 1.0))
        .chain(neg.iter().map(|&e| (e, 0.0)))
        .collect()
}

/// Accuracy at 0.5 and AUC on a labeled set of pairs.
pub fn link_metrics(
    params: &ModelParams,
    table: &NeighborTable,
    features: &FeatureMatrix,
    pos: &[Edge],
    neg: &[Edge],
) -> Result<(f64, f64), TrainError> {
    let items = labeled(pos, neg);
    let pairs: Vec<Edge> = items.iter().map(|&(e, _)| e).collect();
    let probs = score_pairs(params, table, features, &pairs)?;
    let scored = ScoredEdges::new(
        pairs,
        probs,
        items.iter().map(|&(_, y)| y > 0.5).collect(),
    )?;
    Ok((accuracy(&scored, 0.5)?, auc(&scored)?))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One Adam step on a labeled mini-batch; returns the batch loss before
/// the update.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    config: &TrainConfig,
    table: &NeighborTable,
    features: &FeatureMatrix,
    batch: &EdgeBatch,
    dropout: Option<&mut Dropout>,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch.into());
    }
    let mut centers: Vec<usize> = batch.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    centers.sort_unstable();
    centers.dedup();
    let row: HashMap<usize, usize> = centers.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let layout = CenterLayout::new(table, &centers)?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true)?;
    let emb = encode_on_tape(&mut tape, &bound, &layout, features, dropout)?;
    let left: Arc<[usize]> = batch.pairs.iter().map(|&(a, _)| row[&a]).collect();
    let right: Arc<[usize]> = batch.pairs.iter().map(|&(_, b)| row[&b]).collect();
    let logits = logits_on_tape(&mut tape, bound.theta, emb, left, right)?;
    let labels: Arc<[f64]> = batch.labels.as_slice().into();
    let loss = tape
        .logistic_loss(logits, labels)
        .map_err(ModelError::from)?;
    let value = tape.value(loss).item();
    let vars = bound.vars();
    let mut grads = tape.backward(loss).map_err(ModelError::from)?;
    let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.take(v)).collect();
    adam_step(params, &grads, adam, config)?;
    Ok(value)
}

/// Trains from a fresh initialization. `g` is the full graph, `split` and
/// `table` were derived from it. A checkpoint is written to `checkpoint_path`
/// at every new validation best, and the returned checkpoint holds the
/// parameters of the best validation epoch.
pub fn train(
    g: &Graph,
    split: &EdgeSplit,
    table: &NeighborTable,
    model_config: ModelConfig,
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    split.validate_against(g)?;
    if split.train_pos.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if table.num_nodes() != g.num_nodes() || table.sample_size() != model_config.sample_size {
        return Err(TrainError::Config(
            "neighbor table does not match the graph and model configuration".into(),
        ));
    }
    let train_g = training_graph(g, split)?;
    let features = train_g.features();
    if features.dim() != model_config.in_dim {
        return Err(TrainError::Config(format!(
            "model expects {} input columns but features have {}",
            model_config.in_dim,
            features.dim()
        )));
    }

    let mut params = init_params(model_config, config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut sampler = NegativeSampler::new(g, &split.train_pos);
    sampler.exclude(&split.val_neg);
    sampler.exclude(&split.test_neg);

    let mut history = TrainHistory::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = Checkpoint {
        params: params.clone(),
        table_seed: table.seed(),
    };

    for epoch in 1..=config.max_epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let negatives = if epoch == 1 {
            split.train_neg.clone()
        } else {
            sampler.sample(split.train_pos.len(), &mut rng)?
        };
        let mut examples = labeled(&split.train_pos, &negatives);
        examples.shuffle(&mut rng);
        let mut dropout = (config.dropout > 0.0).then(|| Dropout {
            rate: config.dropout,
            rng: ChaCha8Rng::from_rng(&mut rng).expect("chacha seeding is infallible"),
        });

        let mut total = 0.0;
        for (b, chunk) in examples.chunks(config.batch_size).enumerate() {
            let batch = EdgeBatch {
                pairs: chunk.iter().map(|&(e, _)| e).collect(),
                labels: chunk.iter().map(|&(_, y)| y).collect(),
            };
            let loss = train_step(
                &mut params,
                &mut adam,
                config,
                table,
                features,
                &batch,
                dropout.as_mut(),
            )?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / examples.len() as f64;

        let (val_acc, val_auc) = if split.val_pos.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            link_metrics(&params, table, features, &split.val_pos, &split.val_neg)?
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} val_acc {val_acc:.4} val_auc {val_auc:.4}"
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
            val_auc,
        });
        // Without a validation set the latest epoch is the best one.
        let score = if val_acc.is_nan() { epoch as f64 } else { val_acc };
        if stopper.observe(epoch, score) {
            best.params = params.clone();
            history.best_epoch = Some(epoch);
            if let Some(path) = checkpoint_path {
                best.write(path)?;
            }
        }
        if stopper.should_stop() {
            log::info!("early stop at epoch {epoch}; best epoch {:?}", history.best_epoch);
            break;
        }
    }
    if config.max_epochs == 0 {
        if let Some(path) = checkpoint_path {
            best.write(path)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        history,
    })
}
