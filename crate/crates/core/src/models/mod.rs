//! Attention classifiers and the attention encoder-decoder.

mod classifier;
mod rnn;
mod seq2seq;
mod transformer;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tasks::vocab::PAD;

pub use classifier::{argmax, Classifier, ClassifierConfig, ClassifierOutput, Family, Prediction};
pub use rnn::{BiRnn, Encoded, RnnCell, State};
pub use seq2seq::{with_sentinels, Decoded, Seq2Seq, Seq2SeqConfig, Seq2SeqOutput, SOURCE_OFFSET};
pub use transformer::{TransformerBlock, TransformerEncoder};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cell {
    #[default]
    Gru,
    Lstm,
}

impl Cell {
    pub(crate) fn gates(self) -> usize {
        match self {
            Cell::Gru => 3,
            Cell::Lstm => 4,
        }
    }
}

impl FromStr for Cell {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(Cell::Gru),
            "lstm" => Ok(Cell::Lstm),
            other => Err(Error::InvalidInput(format!("unknown cell {other}"))),
        }
    }
}

/// How a model turns encoder states into a context vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    /// Softmax of dot products with a query.
    #[default]
    LearnedDot,
    /// Equal weight on every real token.
    Uniform,
    /// No attention: the state at the last real token.
    NoneLast,
    /// No attention: the state at position 0.
    NoneFirst,
}

impl AttentionVariant {
    pub fn has_attention(self) -> bool {
        matches!(self, AttentionVariant::LearnedDot | AttentionVariant::Uniform)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::LearnedDot => "learned-dot",
            AttentionVariant::Uniform => "uniform",
            AttentionVariant::NoneLast => "none-last",
            AttentionVariant::NoneFirst => "none-first",
        }
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned-dot" | "dot" => Ok(AttentionVariant::LearnedDot),
            "uniform" => Ok(AttentionVariant::Uniform),
            "none-last" | "none" => Ok(AttentionVariant::NoneLast),
            "none-first" => Ok(AttentionVariant::NoneFirst),
            other => Err(Error::InvalidInput(format!("unknown attention variant {other}"))),
        }
    }
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Inference-time replacement of attention weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum AttentionOverride {
    #[default]
    Off,
    /// Zero impermissible weights. With `renormalize`, rescale the rest to
    /// sum to one (uniform over permissible positions if nothing survives).
    Zero { renormalize: bool },
    /// Use these weights (one row per example, padded to the batch width).
    Fixed(Vec<Vec<f64>>),
}

/// Right-padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub width: usize,
    /// `[size · width]`, padded with the pad id.
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if lens.contains(&0) {
            return Err(Error::InvalidInput("empty sequence".into()));
        }
        let width = *lens.iter().max().expect("non-empty batch");
        let mut ids = vec![PAD; seqs.len() * width];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * width..b * width + s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Ok(Batch {
            size: seqs.len(),
            width,
            ids,
            lens,
        })
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lens[b]
    }

    /// Real-token flags `[size · width]`.
    pub fn valid(&self) -> Vec<bool> {
        (0..self.size)
            .flat_map(|b| (0..self.width).map(move |t| (b, t)))
            .map(|(b, t)| self.is_valid(b, t))
            .collect()
    }

    /// Real-token flags for position `t` across the batch.
    pub fn column(&self, t: usize) -> Vec<bool> {
        (0..self.size).map(|b| self.is_valid(b, t)).collect()
    }

    /// Per-example masks flattened to `[size · width]`, false on padding.
    pub fn flatten_masks<M: AsRef<[bool]>>(&self, masks: &[M]) -> Result<Vec<bool>> {
        if masks.len() != self.size {
            return Err(Error::shape("batch", format!("{} masks for {} examples", masks.len(), self.size)));
        }
        let mut out = vec![false; self.size * self.width];
        for (b, m) in masks.iter().enumerate() {
            let m = m.as_ref();
            if m.len() != self.lens[b] {
                return Err(Error::shape("batch", format!("mask of {} for length {}", m.len(), self.lens[b])));
            }
            out[b * self.width..b * self.width + m.len()].copy_from_slice(m);
        }
        Ok(out)
    }
}

/// Repeats a `[d]` vector into `[rows, d]`.
pub(crate) fn broadcast_rows(tape: &mut Tape, v: Var, rows: usize) -> Result<Var> {
    let d = tape.data(v).len();
    let idx = (0..rows).flat_map(|_| 0..d).collect();
    tape.gather(v, idx, vec![rows, d])
}

/// Rows `states[b, pos[b], :]` of a `[B, n, d]` tensor as `[B, d]`.
pub(crate) fn pick_positions(tape: &mut Tape, states: Var, pos: &[usize]) -> Result<Var> {
    let s = tape.shape(states).to_vec();
    let (n, d) = (s[1], s[2]);
    let idx = pos
        .iter()
        .enumerate()
        .flat_map(|(b, &p)| (b * n + p) * d..(b * n + p + 1) * d)
        .collect();
    tape.gather(states, idx, vec![pos.len(), d])
}

/// Uniform weights over the real tokens of each row.
pub(crate) fn uniform_alpha(batch: &Batch) -> Vec<f64> {
    (0..batch.size)
        .flat_map(|b| {
            let w = 1.0 / batch.lens[b] as f64;
            (0..batch.width).map(move |t| if t < batch.lens[b] { w } else { 0.0 })
        })
        .collect()
}

/// Applies an override to a `[rows, n]` block of weights. `valid` and
/// `impermissible` are flattened alongside.
pub(crate) fn override_weights(
    alpha: &[f64],
    n: usize,
    valid: &[bool],
    impermissible: &[bool],
    how: &AttentionOverride,
) -> Result<Vec<f64>> {
    match how {
        AttentionOverride::Off => Ok(alpha.to_vec()),
        AttentionOverride::Fixed(rows) => {
            let rows_needed = alpha.len() / n;
            if rows.len() != rows_needed {
                return Err(Error::shape("override", format!("{} rows for {rows_needed}", rows.len())));
            }
            let mut out = Vec::with_capacity(alpha.len());
            for r in rows {
                if r.len() > n {
                    return Err(Error::shape("override", format!("row of {} for width {n}", r.len())));
                }
                out.extend_from_slice(r);
                out.extend(std::iter::repeat_n(0.0, n - r.len()));
            }
            Ok(out)
        }
        AttentionOverride::Zero { renormalize } => {
            let mut out = alpha.to_vec();
            for r in 0..alpha.len() / n {
                let row = &mut out[r * n..(r + 1) * n];
                let allowed: Vec<bool> = (0..n)
                    .map(|j| valid[r * n + j] && !impermissible[r * n + j])
                    .collect();
                for (w, &ok) in row.iter_mut().zip(&allowed) {
                    if !ok {
                        *w = 0.0;
                    }
                }
                if *renormalize {
                    let kept: f64 = row.iter().sum();
                    if kept > 0.0 {
                        row.iter_mut().for_each(|w| *w /= kept);
                    } else {
                        let count = allowed.iter().filter(|&&a| a).count();
                        if count > 0 {
                            for (w, &ok) in row.iter_mut().zip(&allowed) {
                                *w = if ok { 1.0 / count as f64 } else { 0.0 };
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Constant `[rows, n]` tensor on the tape.
pub(crate) fn constant_matrix(tape: &mut Tape, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
    tape.constant(Tensor::new(shape, data)?)
}
