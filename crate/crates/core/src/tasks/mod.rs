//! Datasets: synthetic generators with gold impermissible masks, and a loader
//! for user-supplied corpora.

mod classification;
mod corpus;
mod seq2seq;
pub mod vocab;

use std::collections::HashSet;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ImpermissibleMask;
use crate::error::{Error, Result};
pub use classification::{anonymize, anonymize_dataset, gen_gender_bios, gen_sentiment_distractor};
pub use corpus::{load_corpus, load_lexicon, read_classification, read_seq2seq, write_classification, write_seq2seq};
pub use seq2seq::{gen_bigram_flip, gen_copy, gen_reverse};
pub use vocab::Vocab;

/// Token sequence with a class label and its impermissible mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub mask: ImpermissibleMask,
}

/// Source/target pair; `align[t]` lists the source positions that produced
/// target token `t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seq2SeqExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub align: Vec<Vec<usize>>,
}

impl Seq2SeqExample {
    /// One impermissible mask over source positions per target step.
    pub fn step_masks(&self) -> Vec<ImpermissibleMask> {
        self.align
            .iter()
            .map(|a| {
                let mut m = ImpermissibleMask::zeros(self.src.len());
                for &i in a {
                    m.0[i] = true;
                }
                m
            })
            .collect()
    }

    /// True when every step aligns to exactly one source position and no
    /// source position is used twice.
    pub fn alignment_is_bijective(&self) -> bool {
        if self.align.len() != self.src.len() || self.tgt.len() != self.src.len() {
            return false;
        }
        let mut seen = vec![false; self.src.len()];
        for a in &self.align {
            if a.len() != 1 || a[0] >= seen.len() || seen[a[0]] {
                return false;
            }
            seen[a[0]] = true;
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationDataset {
    pub vocab: Vocab,
    pub num_classes: usize,
    /// Token ids of the impermissible lexicon.
    pub lexicon: Vec<usize>,
    pub examples: Vec<LabeledExample>,
}

impl ClassificationDataset {
    pub fn lexicon_set(&self) -> HashSet<usize> {
        self.lexicon.iter().copied().collect()
    }

    /// Fraction of all tokens marked impermissible.
    pub fn mask_coverage(&self) -> f64 {
        let (hit, total) = self.examples.iter().fold((0usize, 0usize), |(h, t), e| {
            (h + e.mask.count(), t + e.tokens.len())
        });
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    pub fn with_examples(&self, examples: Vec<LabeledExample>) -> Self {
        ClassificationDataset {
            vocab: self.vocab.clone(),
            num_classes: self.num_classes,
            lexicon: self.lexicon.clone(),
            examples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqDataset {
    pub vocab: Vocab,
    pub examples: Vec<Seq2SeqExample>,
}

impl Seq2SeqDataset {
    /// Fraction of target steps' source positions that are gold-aligned.
    pub fn mask_coverage(&self) -> f64 {
        let (hit, total) = self.examples.iter().fold((0usize, 0usize), |(h, t), e| {
            let hits: usize = e.align.iter().map(Vec::len).sum();
            (h + hits, t + e.align.len() * e.src.len())
        });
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    BigramFlip,
    Copy,
    Reverse,
    GenderBios,
    SentimentDistractor,
}

impl TaskKind {
    pub fn is_seq2seq(self) -> bool {
        matches!(self, TaskKind::BigramFlip | TaskKind::Copy | TaskKind::Reverse)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::BigramFlip => "bigram-flip",
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::GenderBios => "gender-bios",
            TaskKind::SentimentDistractor => "sentiment-distractor",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bigram-flip" | "bigram_flip" | "flip" => Ok(TaskKind::BigramFlip),
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "gender-bios" | "gender" => Ok(TaskKind::GenderBios),
            "sentiment-distractor" | "sentiment" => Ok(TaskKind::SentimentDistractor),
            other => Err(Error::InvalidInput(format!("unknown task {other}"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub task: TaskKind,
    pub n_examples: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(task: TaskKind, n_examples: usize, max_len: usize, vocab_size: usize, seed: u64) -> Self {
        GeneratorSpec {
            task,
            n_examples,
            max_len,
            vocab_size,
            seed,
        }
    }

    /// Independent PRNG stream for one split.
    pub(crate) fn rng(&self, split: Split) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(split.index());
        rng
    }
}

/// FNV-1a over token ids; decides which split a sequence belongs to so the
/// splits are disjoint whatever the streams produce.
pub(crate) fn split_of(tokens: &[usize]) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in tokens {
        for b in (t as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    match h % 3 {
        0 => Split::Train,
        1 => Split::Val,
        _ => Split::Test,
    }
}

/// Either kind of generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Classification(ClassificationDataset),
    Seq2Seq(Seq2SeqDataset),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Classification(d) => d.examples.len(),
            Dataset::Seq2Seq(d) => d.examples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask_coverage(&self) -> f64 {
        match self {
            Dataset::Classification(d) => d.mask_coverage(),
            Dataset::Seq2Seq(d) => d.mask_coverage(),
        }
    }
}

/// Generates one split of the task described by `spec`.
pub fn generate(spec: &GeneratorSpec, split: Split) -> Result<Dataset> {
    Ok(match spec.task {
        TaskKind::BigramFlip => Dataset::Seq2Seq(gen_bigram_flip(spec, split)?),
        TaskKind::Copy => Dataset::Seq2Seq(gen_copy(spec, split)?),
        TaskKind::Reverse => Dataset::Seq2Seq(gen_reverse(spec, split)?),
        TaskKind::GenderBios => Dataset::Classification(gen_gender_bios(spec, split)?),
        TaskKind::SentimentDistractor => Dataset::Classification(gen_sentiment_distractor(spec, split)?),
    })
}
