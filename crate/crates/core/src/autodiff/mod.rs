//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! The engine supports exactly the operations the encoder needs: products,
//! elementwise activations, row gathers, and per-segment softmax and
//! weighted sums, where a segment is one node's neighbor list. Sparse input
//! features enter only through [`Tape::sparse_project`] as constants.

mod tape;
mod tensor;

use std::ops::Range;

use thiserror::Error;

pub use tape::{sigmoid, Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::{SparseRows, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("segment {0} is empty")]
    EmptySegment(usize),
    #[error("segment layout mismatch: {0}")]
    Segment(String),
    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("backward needs a 1x1 loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("{0}")]
    Invalid(String),
}

/// Partition of positions `0..positions()` into consecutive segments.
///
/// Position `p` refers to row `sources()[p]` of whatever value matrix the
/// segment operation reads, so one node's features can appear in many
/// segments without being copied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl Segments {
    pub fn new(offsets: Vec<usize>, sources: Vec<usize>) -> Result<Self, EngineError> {
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&sources.len())
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(EngineError::Segment("offsets must run from 0 to the position count".into()));
        }
        Ok(Self { offsets, sources })
    }

    /// One segment per list, positions reading the listed rows.
    pub fn from_lists<L: AsRef<[usize]>>(lists: &[L]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut sources = Vec::new();
        offsets.push(0);
        for l in lists {
            sources.extend_from_slice(l.as_ref());
            offsets.push(sources.len());
        }
        Self { offsets, sources }
    }

    /// `count` segments of `size` consecutive rows each, reading rows in order.
    pub fn contiguous(count: usize, size: usize) -> Self {
        Self {
            offsets: (0..=count).map(|s| s * size).collect(),
            sources: (0..count * size).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> usize {
        self.sources.len()
    }

    pub fn span(&self, segment: usize) -> Range<usize> {
        self.offsets[segment]..self.offsets[segment + 1]
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// Segment index of every position.
    pub fn owners(&self) -> Vec<usize> {
        let mut owners = Vec::with_capacity(self.positions());
        for s in 0..self.len() {
            owners.extend(std::iter::repeat_n(s, self.span(s).len()));
        }
        owners
    }
}
