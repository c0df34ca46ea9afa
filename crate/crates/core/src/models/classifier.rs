use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rnn::BiRnn;
use super::transformer::TransformerEncoder;
use super::{
    broadcast_rows, constant_matrix, override_weights, pick_positions, uniform_alpha, AttentionOverride,
    AttentionVariant, Batch, Cell,
};
use crate::attention::{AttentionRecord, ImpermissibleMask};
use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Attention directly over word embeddings.
    Embedding,
    /// Attention over bidirectional recurrent states.
    Recurrent,
    /// Small transformer encoder read out at a prepended CLS token.
    Transformer,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Embedding => "embedding",
            Family::Recurrent => "recurrent",
            Family::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" | "emb" => Ok(Family::Embedding),
            "recurrent" | "birnn" | "bilstm" | "bigru" => Ok(Family::Recurrent),
            "transformer" => Ok(Family::Transformer),
            other => Err(Error::InvalidInput(format!("unknown model family {other}"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub family: Family,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    /// Per direction, for the recurrent encoder.
    pub hidden_dim: usize,
    pub cell: Cell,
    pub variant: AttentionVariant,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Longest input the transformer accepts, CLS included.
    pub max_positions: usize,
    /// Apply the permissible/impermissible self-attention mask.
    pub restricted_mask: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            family: Family::Recurrent,
            vocab_size: 0,
            num_classes: 2,
            embed_dim: 128,
            hidden_dim: 128,
            cell: Cell::Gru,
            variant: AttentionVariant::LearnedDot,
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            max_positions: 128,
            restricted_mask: true,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn new(family: Family, vocab_size: usize, num_classes: usize, seed: u64) -> Self {
        ClassifierConfig {
            family,
            vocab_size,
            num_classes,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if self.vocab_size == 0 || self.num_classes < 2 {
            return bad("classifier needs a vocabulary and at least two classes");
        }
        match self.family {
            Family::Embedding if self.embed_dim == 0 => bad("embed_dim must be positive"),
            Family::Recurrent if self.embed_dim == 0 || self.hidden_dim == 0 => {
                bad("embed_dim and hidden_dim must be positive")
            }
            Family::Transformer => {
                if self.layers == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
                    return bad("model_dim must be a positive multiple of heads");
                }
                if self.variant != AttentionVariant::LearnedDot {
                    return bad("the transformer only supports learned-dot attention");
                }
                if self.max_positions < 2 || self.ffn_dim == 0 {
                    return bad("max_positions must be at least 2 and ffn_dim positive");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Embedding {
        emb: ParamId,
        query: ParamId,
    },
    Recurrent {
        emb: ParamId,
        rnn: BiRnn,
        query: ParamId,
    },
    Transformer {
        encoder: TransformerEncoder,
    },
}

/// Attention classifier of any family, owning its parameters.
#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    pub params: ParamStore,
    arch: Arch,
    out_w: ParamId,
    out_b: ParamId,
}

/// Result of a classifier forward pass over a batch.
pub struct ClassifierOutput {
    /// `[B, C]`.
    pub logits: Var,
    /// Attention the penalty sees, each `[B, offset + width]`: one entry for
    /// single-query models, one per (layer, head) for the transformer.
    pub alphas: Vec<Var>,
    /// Leading attention columns that are not input tokens (the CLS slot).
    pub offset: usize,
    pub batch: Batch,
}

impl ClassifierOutput {
    /// Impermissible flags aligned with the columns of each alpha.
    pub fn penalty_mask(&self, masks: &[ImpermissibleMask]) -> Result<Vec<bool>> {
        let flat = self.batch.flatten_masks(masks)?;
        if self.offset == 0 {
            return Ok(flat);
        }
        let w = self.batch.width;
        let mut out = Vec::with_capacity(self.batch.size * (w + self.offset));
        for row in flat.chunks(w) {
            out.extend(std::iter::repeat_n(false, self.offset));
            out.extend_from_slice(row);
        }
        Ok(out)
    }

    /// Per-example attention records, trimmed to each example's length.
    pub fn records(&self, tape: &Tape) -> Vec<AttentionRecord> {
        let cols = self.offset + self.batch.width;
        (0..self.batch.size)
            .map(|b| {
                let keep = self.offset + self.batch.lens[b];
                let heads = self
                    .alphas
                    .iter()
                    .map(|&a| tape.data(a)[b * cols..b * cols + keep].to_vec())
                    .collect();
                AttentionRecord {
                    heads,
                    steps: Vec::new(),
                }
            })
            .collect()
    }
}

/// One prediction with the attention that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub logits: Vec<f64>,
    pub attention: AttentionRecord,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (arch, feature) = match config.family {
            Family::Embedding => {
                let emb = params.add_embedding("embedding", config.vocab_size, config.embed_dim, &mut rng);
                let query = params.add_weight("query", config.embed_dim, 1, &mut rng);
                (Arch::Embedding { emb, query }, config.embed_dim)
            }
            Family::Recurrent => {
                let emb = params.add_embedding("embedding", config.vocab_size, config.embed_dim, &mut rng);
                let rnn = BiRnn::new(
                    &mut params,
                    "encoder",
                    config.cell,
                    config.embed_dim,
                    config.hidden_dim,
                    &mut rng,
                );
                let query = params.add_weight("query", 2 * config.hidden_dim, 1, &mut rng);
                (Arch::Recurrent { emb, rnn, query }, 2 * config.hidden_dim)
            }
            Family::Transformer => {
                let encoder = TransformerEncoder::new(&mut params, &config, &mut rng);
                (Arch::Transformer { encoder }, config.model_dim)
            }
        };
        let out_w = params.add_weight("out.w", feature, config.num_classes, &mut rng);
        let out_b = params.add_zeros("out.b", vec![config.num_classes]);
        Ok(Classifier {
            config,
            params,
            arch,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Token embedding table `[V, d]`.
    pub fn embedding_table(&self) -> ParamId {
        match &self.arch {
            Arch::Embedding { emb, .. } | Arch::Recurrent { emb, .. } => *emb,
            Arch::Transformer { encoder } => encoder.token_embedding(),
        }
    }

    /// Forward pass over a batch. `masks` are the impermissible flags per
    /// example; the transformer needs them for its restricted mask and any
    /// zeroing override needs them too.
    pub fn forward(
        &self,
        tape: &mut Tape,
        seqs: &[&[usize]],
        masks: Option<&[ImpermissibleMask]>,
        how: &AttentionOverride,
    ) -> Result<ClassifierOutput> {
        let batch = Batch::new(seqs)?;
        let impermissible = match masks {
            Some(m) => batch.flatten_masks(m)?,
            None => {
                if matches!(how, AttentionOverride::Zero { .. }) {
                    return Err(Error::Contract("zeroing attention needs impermissible masks".into()));
                }
                vec![false; batch.size * batch.width]
            }
        };
        let (b, n) = (batch.size, batch.width);
        let (feature, alphas, offset) = match &self.arch {
            Arch::Embedding { emb, query } => {
                let table = tape.param(*emb);
                let x = tape.embedding(table, &batch.ids)?;
                let states = tape.reshape(x, vec![b, n, self.config.embed_dim])?;
                let (c, a) = self.attend(tape, states, *query, &batch, &impermissible, how)?;
                (c, a, 0)
            }
            Arch::Recurrent { emb, rnn, query } => {
                let table = tape.param(*emb);
                let x = tape.embedding(table, &batch.ids)?;
                let enc = rnn.encode(tape, x, &batch)?;
                let (c, a) = self.attend(tape, enc.states, *query, &batch, &impermissible, how)?;
                (c, a, 0)
            }
            Arch::Transformer { encoder } => {
                let (states, rows) = encoder.forward(tape, &batch, &impermissible, how)?;
                let cls = pick_positions(tape, states, &vec![0; b])?;
                (cls, rows, 1)
            }
        };
        let (w, bias) = (tape.param(self.out_w), tape.param(self.out_b));
        let logits = tape.linear(feature, w, Some(bias))?;
        Ok(ClassifierOutput {
            logits,
            alphas,
            offset,
            batch,
        })
    }

    /// Per-position representations the attention reads: embeddings,
    /// recurrent states, or final transformer states (CLS at position 0).
    pub fn token_states(&self, tape: &mut Tape, seqs: &[&[usize]], masks: Option<&[ImpermissibleMask]>) -> Result<Var> {
        let batch = Batch::new(seqs)?;
        let impermissible = match masks {
            Some(m) => batch.flatten_masks(m)?,
            None => vec![false; batch.size * batch.width],
        };
        match &self.arch {
            Arch::Embedding { emb, .. } => {
                let table = tape.param(*emb);
                let x = tape.embedding(table, &batch.ids)?;
                tape.reshape(x, vec![batch.size, batch.width, self.config.embed_dim])
            }
            Arch::Recurrent { emb, rnn, .. } => {
                let table = tape.param(*emb);
                let x = tape.embedding(table, &batch.ids)?;
                Ok(rnn.encode(tape, x, &batch)?.states)
            }
            Arch::Transformer { encoder } => {
                Ok(encoder.forward(tape, &batch, &impermissible, &AttentionOverride::Off)?.0)
            }
        }
    }

    /// Context vector and attention for the single-query families.
    fn attend(
        &self,
        tape: &mut Tape,
        states: Var,
        query: ParamId,
        batch: &Batch,
        impermissible: &[bool],
        how: &AttentionOverride,
    ) -> Result<(Var, Vec<Var>)> {
        let (b, n) = (batch.size, batch.width);
        let valid = batch.valid();
        let alpha = match self.config.variant {
            AttentionVariant::LearnedDot => {
                let q = tape.param(query);
                let qb = broadcast_rows(tape, q, b)?;
                let scores = tape.batched_scores(states, qb)?;
                tape.softmax(scores, Some(valid.clone()))?
            }
            AttentionVariant::Uniform => constant_matrix(tape, uniform_alpha(batch), vec![b, n])?,
            AttentionVariant::NoneLast | AttentionVariant::NoneFirst => {
                let pos: Vec<usize> = if self.config.variant == AttentionVariant::NoneLast {
                    batch.lens.iter().map(|l| l - 1).collect()
                } else {
                    vec![0; b]
                };
                return Ok((pick_positions(tape, states, &pos)?, Vec::new()));
            }
        };
        let alpha = match how {
            AttentionOverride::Off => alpha,
            other => {
                let w = override_weights(tape.data(alpha), n, &valid, impermissible, other)?;
                constant_matrix(tape, w, vec![b, n])?
            }
        };
        let context = tape.batched_context(alpha, states)?;
        Ok((context, vec![alpha]))
    }

    /// Inference over many examples in chunks of `batch_size`.
    pub fn predict(
        &self,
        seqs: &[&[usize]],
        masks: Option<&[ImpermissibleMask]>,
        how: &AttentionOverride,
        batch_size: usize,
    ) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(seqs.len());
        let step = batch_size.max(1);
        for (ci, chunk) in seqs.chunks(step).enumerate() {
            let chunk_masks = masks.map(|m| &m[ci * step..ci * step + chunk.len()]);
            let chunk_how = match how {
                AttentionOverride::Fixed(rows) => {
                    AttentionOverride::Fixed(rows[ci * step..ci * step + chunk.len()].to_vec())
                }
                other => other.clone(),
            };
            let mut tape = Tape::inference(&self.params);
            let res = self.forward(&mut tape, chunk, chunk_masks, &chunk_how)?;
            let records = res.records(&tape);
            let logits = tape.data(res.logits);
            let c = self.config.num_classes;
            for (b, attention) in records.into_iter().enumerate() {
                let row = logits[b * c..(b + 1) * c].to_vec();
                out.push(Prediction {
                    label: argmax(&row),
                    logits: row,
                    attention,
                });
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.params, serde_json::json!({ "classifier": self.config }))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ClassifierConfig = serde_json::from_value(
            ck.meta
                .get("classifier")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("no classifier config in checkpoint".into()))?,
        )?;
        let mut model = Classifier::new(config)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
