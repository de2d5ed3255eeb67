use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BoundLayer, HeadMerge, ModelError, LEAKY_SLOPE};
use crate::autodiff::{EngineError, Segments, SparseRows, Tape, Tensor, Var};

/// Which input rows each output row attends over.
///
/// Segment `s` produces output row `s`; its positions read the input rows
/// listed in the segment, and `centers[s]` is the input row of the node
/// doing the attending.
#[derive(Clone, Debug)]
pub struct Neighborhoods {
    segments: Arc<Segments>,
    centers: Vec<usize>,
    center_per_position: Arc<[usize]>,
    sources: Arc<[usize]>,
}

impl Neighborhoods {
    pub fn new(centers: Vec<usize>, segments: Segments) -> Result<Self, ModelError> {
        if centers.len() != segments.len() {
            return Err(ModelError::Config(format!(
                "{} centers for {} segments",
                centers.len(),
                segments.len()
            )));
        }
        let center_per_position: Arc<[usize]> =
            segments.owners().into_iter().map(|s| centers[s]).collect();
        let sources: Arc<[usize]> = segments.sources().into();
        Ok(Self {
            segments: Arc::new(segments),
            centers,
            center_per_position,
            sources,
        })
    }

    /// One segment per `(center, members)` pair.
    pub fn from_lists(centers: Vec<usize>, members: &[Vec<usize>]) -> Result<Self, ModelError> {
        Self::new(centers, Segments::from_lists(members))
    }

    pub fn segments(&self) -> &Segments {
        &self.segments
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn max_row(&self) -> Option<usize> {
        self.sources
            .iter()
            .chain(self.centers.iter())
            .copied()
            .max()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Identity,
}

/// A layer's input: constant sparse rows, or dense rows already on the tape.
#[derive(Clone, Debug)]
pub enum LayerInput {
    Sparse(Arc<SparseRows>),
    Dense(Var),
}

/// Inverted dropout applied to attention coefficients and hidden units.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn mask(&mut self, len: usize) -> Arc<[f64]> {
        let keep = 1.0 - self.rate;
        (0..len)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }

    pub(crate) fn apply(&mut self, tape: &mut Tape, v: Var) -> Result<Var, EngineError> {
        if self.rate <= 0.0 {
            return Ok(v);
        }
        let mask = self.mask(tape.value(v).len());
        tape.mask(v, mask)
    }
}

/// Normalized attention coefficients, one per neighborhood position.
///
/// `transformed` holds the projected input rows. Each position's logit is
/// `leaky_relu(a_left · z[center] + a_right · z[member])`, normalized with a
/// softmax inside its neighborhood. Without an attention vector every
/// coefficient is one.
pub fn attention_coefficients(
    attention: Option<&Tensor>,
    transformed: &Tensor,
    hood: &Neighborhoods,
) -> Result<Vec<f64>, ModelError> {
    let segments = hood.segments();
    if let Some(s) = (0..segments.len()).find(|&s| segments.span(s).is_empty()) {
        return Err(EngineError::EmptySegment(s).into());
    }
    if let Some(max) = hood.max_row() {
        if max >= transformed.rows() {
            return Err(EngineError::IndexOutOfRange {
                index: max,
                rows: transformed.rows(),
            }
            .into());
        }
    }
    let Some(a) = attention else {
        return Ok(vec![1.0; segments.positions()]);
    };
    let f = transformed.cols();
    if a.shape() != (2 * f, 1) {
        return Err(EngineError::ShapeMismatch {
            op: "attention_coefficients",
            left: a.shape(),
            right: transformed.shape(),
        }
        .into());
    }
    let (al, ar) = a.data().split_at(f);
    let score = |row: usize, w: &[f64]| -> f64 {
        transformed.row(row).iter().zip(w).map(|(x, y)| x * y).sum()
    };
    let mut out = vec![0.0; segments.positions()];
    for s in 0..segments.len() {
        let left = score(hood.centers[s], al);
        let span = segments.span(s);
        for p in span.clone() {
            let e = left + score(segments.sources()[p], ar);
            out[p] = if e >= 0.0 { e } else { LEAKY_SLOPE * e };
        }
        let max = out[span.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in &mut out[span.clone()] {
            *v = (*v - max).exp();
            total += *v;
        }
        out[span].iter_mut().for_each(|v| *v /= total);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::NonFinite {
            op: "attention_coefficients",
        }
        .into());
    }
    Ok(out)
}

/// Learned coefficients on the tape, given per-row left and right scores.
fn tape_attention(
    tape: &mut Tape,
    left: Var,
    right: Var,
    hood: &Neighborhoods,
) -> Result<Var, EngineError> {
    let l = tape.gather_rows(left, hood.center_per_position.clone())?;
    let r = tape.gather_rows(right, hood.sources.clone())?;
    let e = tape.add(l, r)?;
    let e = tape.leaky_relu(e, LEAKY_SLOPE)?;
    tape.segment_softmax(e, hood.segments.clone())
}

/// One attention layer: for each head, attention-weighted sums of projected
/// neighbor rows, then the activation, then the head merge.
///
/// Sparse inputs are projected first and then aggregated; dense inputs are
/// aggregated first and then projected, which gives the same result with a
/// far smaller matrix product when neighborhoods overlap little.
pub fn layer_forward(
    tape: &mut Tape,
    layer: &BoundLayer,
    input: &LayerInput,
    hood: &Neighborhoods,
    activation: Activation,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var, ModelError> {
    let mut heads = Vec::with_capacity(layer.weights.len());
    for (k, &w) in layer.weights.iter().enumerate() {
        let width = tape.value(w).cols();
        let split = |tape: &mut Tape| -> Result<Option<(Var, Var)>, EngineError> {
            match &layer.attention {
                Some(att) => Ok(Some((
                    tape.slice_rows(att[k], 0, width)?,
                    tape.slice_rows(att[k], width, width)?,
                ))),
                None => Ok(None),
            }
        };
        let head = match input {
            LayerInput::Sparse(x) => {
                let z = tape.sparse_project(x.clone(), w)?;
                let alpha = match split(tape)? {
                    Some((al, ar)) => {
                        let sl = tape.matmul(z, al)?;
                        let sr = tape.matmul(z, ar)?;
                        Some(tape_attention(tape, sl, sr, hood)?)
                    }
                    None => None,
                };
                let alpha = drop_weights(tape, alpha, hood, dropout.as_deref_mut())?;
                tape.segment_weighted_sum(z, alpha, hood.segments.clone())?
            }
            LayerInput::Dense(h) => {
                let alpha = match split(tape)? {
                    Some((al, ar)) => {
                        let ul = tape.matmul(w, al)?;
                        let ur = tape.matmul(w, ar)?;
                        let sl = tape.matmul(*h, ul)?;
                        let sr = tape.matmul(*h, ur)?;
                        Some(tape_attention(tape, sl, sr, hood)?)
                    }
                    None => None,
                };
                let alpha = drop_weights(tape, alpha, hood, dropout.as_deref_mut())?;
                let agg = tape.segment_weighted_sum(*h, alpha, hood.segments.clone())?;
                tape.matmul(agg, w)?
            }
        };
        heads.push(match activation {
            Activation::Elu => tape.elu(head)?,
            Activation::Identity => head,
        });
    }
    let merged = match layer.merge {
        HeadMerge::Concat if heads.len() == 1 => heads[0],
        HeadMerge::Concat => tape.concat_cols(&heads)?,
        HeadMerge::Average => tape.mean(&heads)?,
    };
    Ok(merged)
}

fn drop_weights(
    tape: &mut Tape,
    alpha: Option<Var>,
    hood: &Neighborhoods,
    dropout: Option<&mut Dropout>,
) -> Result<Option<Var>, EngineError> {
    let Some(d) = dropout.filter(|d| d.rate > 0.0) else {
        return Ok(alpha);
    };
    match alpha {
        Some(a) => d.apply(tape, a).map(Some),
        None => {
            let mask = d.mask(hood.segments.positions());
            let ones = tape.constant(Tensor::column(mask.to_vec()))?;
            Ok(Some(ones))
        }
    }
}
