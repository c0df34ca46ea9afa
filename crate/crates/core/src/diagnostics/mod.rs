//! Measurements over trained models: accuracy, attention mass, post-hoc
//! zeroing, embedding norms, and attention maps.

mod heatmap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::ImpermissibleMask;
use crate::autodiff::{ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::models::{AttentionOverride, Classifier, Seq2Seq, SOURCE_OFFSET};
use crate::tasks::vocab::NUM_RESERVED;
use crate::tasks::{ClassificationDataset, Seq2SeqDataset, Seq2SeqExample};

pub use heatmap::{alignment_hit_rate, HeatmapMatrix};

/// Examples per inference pass.
pub const EVAL_BATCH: usize = 64;

/// Matches at aligned positions over the longer length; two empty
/// sequences count as a perfect match.
pub fn token_accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    let longest = pred.len().max(gold.len());
    if longest == 0 {
        return 1.0;
    }
    let hits = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    hits as f64 / longest as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub accuracy: f64,
}

/// Corpus-level attention mass, reduced over heads two ways. Both are equal
/// for single-query models and zero for attention-free ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MassSummary {
    pub mean_over_heads: f64,
    pub max_over_heads: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEval {
    pub accuracy: f64,
    pub mass: MassSummary,
    pub per_class: Vec<ClassStats>,
    /// Largest single attention weight, averaged over examples and heads.
    pub peak_attention: f64,
}

struct ExampleEval {
    correct: bool,
    label: usize,
    mass_mean: f64,
    mass_max: f64,
    peak: f64,
}

/// Accuracy and attention mass of `model` on `data`, optionally with an
/// attention override at inference.
pub fn evaluate_classifier(
    model: &Classifier,
    data: &ClassificationDataset,
    how: &AttentionOverride,
) -> Result<ClassifierEval> {
    if data.examples.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let chunks: Vec<Result<Vec<ExampleEval>>> = data
        .examples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
            let masks: Vec<ImpermissibleMask> = chunk.iter().map(|e| e.mask.clone()).collect();
            let preds = model.predict(&seqs, Some(&masks), how, EVAL_BATCH)?;
            let offset = usize::from(model.config().family == crate::models::Family::Transformer);
            chunk
                .iter()
                .zip(preds)
                .map(|(e, p)| {
                    let mut full = vec![false; offset];
                    full.extend_from_slice(&e.mask.0);
                    let full = ImpermissibleMask(full);
                    let masses = p
                        .attention
                        .heads
                        .iter()
                        .map(|a| crate::attention::attention_mass(a, &full))
                        .collect::<Result<Vec<f64>>>()?;
                    let peaks: Vec<f64> = p
                        .attention
                        .heads
                        .iter()
                        .map(|a| a.iter().cloned().fold(0.0, f64::max))
                        .collect();
                    let h = masses.len().max(1) as f64;
                    Ok(ExampleEval {
                        correct: p.label == e.label,
                        label: e.label,
                        mass_mean: masses.iter().sum::<f64>() / h,
                        mass_max: masses.iter().cloned().fold(0.0, f64::max),
                        peak: peaks.iter().sum::<f64>() / h,
                    })
                })
                .collect()
        })
        .collect();
    let mut all = Vec::with_capacity(data.examples.len());
    for c in chunks {
        all.extend(c?);
    }
    let n = all.len() as f64;
    let per_class = (0..data.num_classes)
        .map(|class| {
            let of: Vec<&ExampleEval> = all.iter().filter(|e| e.label == class).collect();
            let count = of.len();
            let accuracy = if count == 0 {
                0.0
            } else {
                of.iter().filter(|e| e.correct).count() as f64 / count as f64
            };
            ClassStats { class, count, accuracy }
        })
        .collect();
    Ok(ClassifierEval {
        accuracy: all.iter().filter(|e| e.correct).count() as f64 / n,
        mass: MassSummary {
            mean_over_heads: all.iter().map(|e| e.mass_mean).sum::<f64>() / n,
            max_over_heads: all.iter().map(|e| e.mass_max).sum::<f64>() / n,
        },
        per_class,
        peak_attention: all.iter().map(|e| e.peak).sum::<f64>() / n,
    })
}

/// Mean over examples of `αᵀm`.
pub fn corpus_attention_mass(model: &Classifier, data: &ClassificationDataset) -> Result<MassSummary> {
    Ok(evaluate_classifier(model, data, &AttentionOverride::Off)?.mass)
}

/// Accuracy after zeroing impermissible attention at inference. With
/// `renormalize` the surviving weights are rescaled to sum to one.
pub fn zero_and_eval(model: &Classifier, data: &ClassificationDataset, renormalize: bool) -> Result<f64> {
    Ok(evaluate_classifier(model, data, &AttentionOverride::Zero { renormalize })?.accuracy)
}

/// Mean L2 norm of the lexicon rows of `table` over the mean norm of a fixed
/// seeded sample of up to 100 other non-reserved rows.
pub fn embedding_norm_ratio(store: &ParamStore, table: ParamId, lexicon: &[usize], seed: u64) -> Result<f64> {
    if lexicon.is_empty() {
        return Err(Error::Contract("norm ratio needs a non-empty lexicon".into()));
    }
    let t = store.get(table);
    let (rows, d) = (t.shape()[0], t.shape()[1]);
    let norm = |i: usize| t.data()[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
    if let Some(&bad) = lexicon.iter().find(|&&i| i >= rows) {
        return Err(Error::Index {
            op: "embedding_norm_ratio",
            index: bad,
            size: rows,
        });
    }
    let permissible: Vec<usize> = (NUM_RESERVED..rows).filter(|i| !lexicon.contains(i)).collect();
    if permissible.is_empty() {
        return Err(Error::Contract("no permissible rows to compare against".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, permissible.len(), permissible.len().min(100));
    let denom = picked.iter().map(|k| norm(permissible[k])).sum::<f64>() / picked.len() as f64;
    let numer = lexicon.iter().map(|&i| norm(i)).sum::<f64>() / lexicon.len() as f64;
    Ok(numer / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqEval {
    /// Greedy-decoding token accuracy, averaged over examples.
    pub token_accuracy: f64,
    /// Share of examples decoded exactly.
    pub exact_match: f64,
    /// Attention on the gold source position, mean over target steps then
    /// examples, measured with gold previous tokens fed to the decoder.
    pub attention_mass: f64,
}

/// Impermissible flags over `<s> src </s>` for each target step.
pub fn step_masks(e: &Seq2SeqExample) -> Vec<Vec<bool>> {
    e.align
        .iter()
        .map(|a| {
            let mut m = vec![false; e.src.len() + 2];
            for &i in a {
                m[i + SOURCE_OFFSET] = true;
            }
            m
        })
        .collect()
}

/// Longest output greedy decoding may produce for a source of length `n`.
pub fn decode_limit(n: usize) -> usize {
    2 * n + 2
}

pub fn evaluate_seq2seq(model: &Seq2Seq, data: &Seq2SeqDataset) -> Result<Seq2SeqEval> {
    if data.examples.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let per: Vec<Result<Vec<(f64, bool, f64)>>> = data
        .examples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let srcs: Vec<&[usize]> = chunk.iter().map(|e| e.src.as_slice()).collect();
            let tgts: Vec<&[usize]> = chunk.iter().map(|e| e.tgt.as_slice()).collect();
            let limit = chunk.iter().map(|e| decode_limit(e.src.len())).max().unwrap_or(0);
            let decoded = model.decode_batch(&srcs, limit)?;
            let masses = teacher_forced_mass(model, &srcs, &tgts, chunk)?;
            Ok(chunk
                .iter()
                .zip(decoded)
                .zip(masses)
                .map(|((e, d), m)| {
                    let tokens = &d.tokens[..d.tokens.len().min(decode_limit(e.src.len()))];
                    (token_accuracy(tokens, &e.tgt), tokens == e.tgt.as_slice(), m)
                })
                .collect())
        })
        .collect();
    let mut all = Vec::with_capacity(data.examples.len());
    for c in per {
        all.extend(c?);
    }
    let n = all.len() as f64;
    Ok(Seq2SeqEval {
        token_accuracy: all.iter().map(|x| x.0).sum::<f64>() / n,
        exact_match: all.iter().filter(|x| x.1).count() as f64 / n,
        attention_mass: all.iter().map(|x| x.2).sum::<f64>() / n,
    })
}

/// Per-example gold-alignment mass with gold previous tokens.
fn teacher_forced_mass(
    model: &Seq2Seq,
    srcs: &[&[usize]],
    tgts: &[&[usize]],
    examples: &[Seq2SeqExample],
) -> Result<Vec<f64>> {
    let mut tape = Tape::inference(&model.params);
    // Ratio 1 never consults the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&mut tape, srcs, tgts, 1.0, &mut rng)?;
    let w = out.source.width;
    Ok(examples
        .iter()
        .enumerate()
        .map(|(b, e)| {
            if e.tgt.is_empty() {
                return 0.0;
            }
            let masks = step_masks(e);
            let total: f64 = masks
                .iter()
                .enumerate()
                .map(|(t, m)| match out.alphas[t] {
                    Some(a) => {
                        let row = &tape.data(a)[b * w..b * w + m.len()];
                        row.iter().zip(m).filter(|(_, &x)| x).map(|(v, _)| v).sum()
                    }
                    None => 0.0,
                })
                .sum();
            total / masks.len() as f64
        })
        .collect())
}

/// Everything reported about one trained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub attention_mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_mass_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeroed_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_ratio_series: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_attention: Option<f64>,
}

impl MetricsReport {
    pub fn from_classifier(eval: &ClassifierEval) -> Self {
        MetricsReport {
            accuracy: eval.accuracy,
            attention_mass: eval.mass.mean_over_heads,
            attention_mass_max: Some(eval.mass.max_over_heads),
            per_class: eval.per_class.clone(),
            peak_attention: Some(eval.peak_attention),
            ..Default::default()
        }
    }

    pub fn from_seq2seq(eval: &Seq2SeqEval) -> Self {
        MetricsReport {
            accuracy: eval.token_accuracy,
            attention_mass: eval.attention_mass,
            ..Default::default()
        }
    }
}
