//! Bidirectional recurrent encoder, unidirectional recurrent decoder, and
//! dot-product attention over the source at every decoding step.
//!
//! The encoder reads `<s> src </s>`: the two sentinels give the attention
//! somewhere other than the gold source token to go even for length-1
//! inputs. Source position `i` therefore appears at attention column `i + 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rnn::{BiRnn, RnnCell};
use super::{argmax, constant_matrix, pick_positions, uniform_alpha, AttentionVariant, Batch, Cell};
use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tasks::vocab::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2SeqConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Decoder state size; each encoder direction gets half.
    pub hidden_dim: usize,
    pub cell: Cell,
    pub variant: AttentionVariant,
    pub seed: u64,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            vocab_size: 0,
            embed_dim: 256,
            hidden_dim: 512,
            cell: Cell::Gru,
            variant: AttentionVariant::LearnedDot,
            seed: 0,
        }
    }
}

impl Seq2SeqConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Seq2SeqConfig {
            vocab_size,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS || self.embed_dim == 0 || self.hidden_dim < 2 || self.hidden_dim % 2 != 0 {
            return Err(Error::InvalidInput(
                "seq2seq needs the reserved symbols in its vocabulary, embed_dim > 0 and an even hidden_dim".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    config: Seq2SeqConfig,
    pub params: ParamStore,
    src_emb: ParamId,
    encoder: BiRnn,
    init: (ParamId, ParamId),
    tgt_emb: ParamId,
    decoder: RnnCell,
    out: (ParamId, ParamId),
}

/// Everything a training step needs from one teacher-forced pass.
pub struct Seq2SeqOutput {
    /// `[B, V]` per decoding step.
    pub logits: Vec<Var>,
    /// `[B, n + 2]` per step, `None` for the attention-free variants.
    pub alphas: Vec<Option<Var>>,
    /// Gold token per step and example (`</s>` after the target, pad beyond).
    pub targets: Vec<Vec<usize>>,
    /// Whether step `t` is part of example `b`'s output (target plus `</s>`).
    pub step_valid: Vec<Vec<bool>>,
    /// Tokens fed to the decoder at each step.
    pub inputs: Vec<Vec<usize>>,
    /// Encoder batch including the sentinels.
    pub source: Batch,
}

/// Greedy output for one source sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Emitted tokens, without the closing `</s>`.
    pub tokens: Vec<usize>,
    /// Attention over `<s> src </s>` for each emitted token.
    pub alphas: Vec<Vec<f64>>,
}

/// `<s> src </s>`.
pub fn with_sentinels(src: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(src.len() + 2);
    v.push(BOS);
    v.extend_from_slice(src);
    v.push(EOS);
    v
}

/// Attention column of source position 0.
pub const SOURCE_OFFSET: usize = 1;

struct Context {
    fixed: Option<Var>,
}

impl Seq2Seq {
    pub fn new(config: Seq2SeqConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let src_emb = params.add_embedding("src_embedding", v, e, &mut rng);
        let encoder = BiRnn::new(&mut params, "encoder", config.cell, e, h / 2, &mut rng);
        let init = (
            params.add_weight("init.w", h, h, &mut rng),
            params.add_zeros("init.b", vec![h]),
        );
        let tgt_emb = params.add_embedding("tgt_embedding", v, e, &mut rng);
        let decoder = RnnCell::new(&mut params, "decoder", config.cell, e + h, h, &mut rng);
        let out = (
            params.add_weight("out.w", 2 * h, v, &mut rng),
            params.add_zeros("out.b", vec![v]),
        );
        Ok(Seq2Seq {
            config,
            params,
            src_emb,
            encoder,
            init,
            tgt_emb,
            decoder,
            out,
        })
    }

    pub fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }

    fn check_sources(&self, srcs: &[&[usize]]) -> Result<()> {
        if srcs.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidInput("empty source sequence".into()));
        }
        Ok(())
    }

    /// Encodes the sources; returns encoder states, the initial decoder
    /// state, and the source batch.
    fn encode(&self, tape: &mut Tape, srcs: &[&[usize]]) -> Result<(Var, Var, Batch)> {
        let padded: Vec<Vec<usize>> = srcs.iter().map(|s| with_sentinels(s)).collect();
        let batch = Batch::new(&padded)?;
        let table = tape.param(self.src_emb);
        let x = tape.embedding(table, &batch.ids)?;
        let enc = self.encoder.encode(tape, x, &batch)?;
        let ends = tape.concat(&[enc.fwd_last, enc.bwd_first])?;
        let (w, b) = (tape.param(self.init.0), tape.param(self.init.1));
        let pre = tape.linear(ends, w, Some(b))?;
        let s0 = tape.tanh(pre)?;
        Ok((enc.states, s0, batch))
    }

    fn prepare_context(&self, tape: &mut Tape, states: Var, batch: &Batch) -> Result<Context> {
        let fixed = match self.config.variant {
            AttentionVariant::NoneLast => {
                let pos: Vec<usize> = batch.lens.iter().map(|l| l - 1).collect();
                Some(pick_positions(tape, states, &pos)?)
            }
            AttentionVariant::NoneFirst => Some(pick_positions(tape, states, &vec![0; batch.size])?),
            _ => None,
        };
        Ok(Context { fixed })
    }

    fn attend(
        &self,
        tape: &mut Tape,
        ctx: &Context,
        states: Var,
        query: Var,
        batch: &Batch,
        valid: &[bool],
    ) -> Result<(Var, Option<Var>)> {
        if let Some(c) = ctx.fixed {
            return Ok((c, None));
        }
        let alpha = match self.config.variant {
            AttentionVariant::Uniform => constant_matrix(tape, uniform_alpha(batch), vec![batch.size, batch.width])?,
            _ => {
                let scores = tape.batched_scores(states, query)?;
                tape.softmax(scores, Some(valid.to_vec()))?
            }
        };
        Ok((tape.batched_context(alpha, states)?, Some(alpha)))
    }

    /// One decoder step from `prev` tokens; returns logits, new state, alpha.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        tape: &mut Tape,
        ctx: &Context,
        states: Var,
        s: super::State,
        prev: &[usize],
        batch: &Batch,
        valid: &[bool],
    ) -> Result<(Var, super::State, Option<Var>)> {
        let (c, alpha) = self.attend(tape, ctx, states, s.h, batch, valid)?;
        let table = tape.param(self.tgt_emb);
        let y = tape.embedding(table, prev)?;
        let x = tape.concat(&[y, c])?;
        let xp = self.decoder.project(tape, x)?;
        let next = self.decoder.step(tape, xp, s)?;
        let feat = tape.concat(&[next.h, c])?;
        let (w, b) = (tape.param(self.out.0), tape.param(self.out.1));
        let logits = tape.linear(feat, w, Some(b))?;
        Ok((logits, next, alpha))
    }

    /// Decodes with gold targets available. At each step after the first the
    /// gold previous token is fed with probability `ratio`, otherwise the
    /// model's own argmax; one draw per step for the whole batch.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        srcs: &[&[usize]],
        tgts: &[&[usize]],
        ratio: f64,
        rng: &mut R,
    ) -> Result<Seq2SeqOutput> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::InvalidInput(format!("teacher forcing ratio {ratio} outside [0, 1]")));
        }
        if srcs.len() != tgts.len() {
            return Err(Error::shape("seq2seq", format!("{} sources, {} targets", srcs.len(), tgts.len())));
        }
        self.check_sources(srcs)?;
        let (states, s0, batch) = self.encode(tape, srcs)?;
        let valid = batch.valid();
        let ctx = self.prepare_context(tape, states, &batch)?;
        let steps = tgts.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
        let b = srcs.len();

        let mut s = self.decoder.state_from(tape, s0)?;
        let mut prev = vec![BOS; b];
        let mut out = Seq2SeqOutput {
            logits: Vec::with_capacity(steps),
            alphas: Vec::with_capacity(steps),
            targets: Vec::with_capacity(steps),
            step_valid: Vec::with_capacity(steps),
            inputs: Vec::with_capacity(steps),
            source: batch.clone(),
        };
        for t in 0..steps {
            if t > 0 {
                let teacher = rng.gen::<f64>() < ratio;
                let last = *out.logits.last().expect("previous step");
                let v = self.config.vocab_size;
                let data = tape.data(last);
                prev = (0..b)
                    .map(|bi| if teacher { out.targets[t - 1][bi] } else { argmax(&data[bi * v..(bi + 1) * v]) })
                    .collect();
                // Finished rows keep feeding a pad token.
                for (bi, p) in prev.iter_mut().enumerate() {
                    if !out.step_valid[t - 1][bi] {
                        *p = PAD;
                    }
                }
            }
            let (logits, next, alpha) = self.step(tape, &ctx, states, s, &prev, &batch, &valid)?;
            s = next;
            out.inputs.push(prev.clone());
            out.logits.push(logits);
            out.alphas.push(alpha);
            out.targets.push(
                tgts.iter()
                    .map(|tg| match t.cmp(&tg.len()) {
                        std::cmp::Ordering::Less => tg[t],
                        std::cmp::Ordering::Equal => EOS,
                        std::cmp::Ordering::Greater => PAD,
                    })
                    .collect(),
            );
            out.step_valid.push(tgts.iter().map(|tg| t <= tg.len()).collect());
        }
        Ok(out)
    }

    /// Greedy decoding of a batch; each row stops at `</s>` or `max_len`.
    pub fn decode_batch(&self, srcs: &[&[usize]], max_len: usize) -> Result<Vec<Decoded>> {
        self.check_sources(srcs)?;
        let b = srcs.len();
        let mut done: Vec<Decoded> = vec![
            Decoded {
                tokens: Vec::new(),
                alphas: Vec::new()
            };
            b
        ];
        if max_len == 0 || b == 0 {
            return Ok(done);
        }
        let mut tape = Tape::inference(&self.params);
        let (states, s0, batch) = self.encode(&mut tape, srcs)?;
        let valid = batch.valid();
        let ctx = self.prepare_context(&mut tape, states, &batch)?;
        let mut s = self.decoder.state_from(&mut tape, s0)?;
        let mut prev = vec![BOS; b];
        let mut finished = vec![false; b];
        let v = self.config.vocab_size;
        let w = batch.width;
        for _ in 0..max_len {
            let (logits, next, alpha) = self.step(&mut tape, &ctx, states, s, &prev, &batch, &valid)?;
            s = next;
            let data = tape.data(logits);
            for bi in 0..b {
                if finished[bi] {
                    prev[bi] = PAD;
                    continue;
                }
                let tok = argmax(&data[bi * v..(bi + 1) * v]);
                if tok == EOS {
                    finished[bi] = true;
                    prev[bi] = PAD;
                    continue;
                }
                done[bi].tokens.push(tok);
                if let Some(a) = alpha {
                    done[bi].alphas.push(tape.data(a)[bi * w..bi * w + batch.lens[bi]].to_vec());
                }
                prev[bi] = tok;
            }
            if finished.iter().all(|&f| f) {
                break;
            }
        }
        Ok(done)
    }

    pub fn decode_greedy(&self, src: &[usize], max_len: usize) -> Result<Decoded> {
        Ok(self.decode_batch(&[src], max_len)?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.params, serde_json::json!({ "seq2seq": self.config }))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: Seq2SeqConfig = serde_json::from_value(
            ck.meta
                .get("seq2seq")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("no seq2seq config in checkpoint".into()))?,
        )?;
        let mut model = Seq2Seq::new(config)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}
