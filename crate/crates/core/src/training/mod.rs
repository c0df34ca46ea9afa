//! Penalized training, checkpoint selection and λ sweeps.

mod adam;
mod select;
pub mod sweep;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ImpermissibleMask, penalty_kl_adversarial, penalty_multihead_max, penalty_multihead_mean, penalty_single, PenaltyVariant};
use crate::autodiff::{Gradients, ParamStore, Tape, Var};
use crate::diagnostics::{evaluate_classifier, evaluate_seq2seq, step_masks};
use crate::error::{Error, Result};
use crate::models::{AttentionOverride, Classifier, Family, Seq2Seq};
use crate::tasks::{ClassificationDataset, LabeledExample, Seq2SeqDataset, Seq2SeqExample};

pub use adam::{clip_grad_norm, Adam};
pub use select::{checkpoint_name, most_accurate, select_checkpoint, CheckpointRecord, Selection, SelectionRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub penalty: PenaltyVariant,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub teacher_forcing_ratio: f64,
    /// Global gradient-norm limit, applied to recurrent models only.
    pub clip_norm: Option<f64>,
    pub selection: SelectionRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.0,
            penalty: PenaltyVariant::Single,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            teacher_forcing_ratio: 0.5,
            clip_norm: Some(1.0),
            selection: SelectionRule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidInput(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_ratio) {
            return Err(Error::InvalidInput("teacher_forcing_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Generator for epoch `epoch` (1-based); independent of earlier epochs
    /// so a resumed run sees the same batches.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        rng
    }
}

/// Optimizer position and history after some number of epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: Adam,
    pub records: Vec<CheckpointRecord>,
}

/// Records plus the weights after every epoch (`snapshots[e - 1]`).
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub records: Vec<CheckpointRecord>,
    pub snapshots: Vec<ParamStore>,
    pub state: TrainState,
}

impl TrainRun {
    pub fn snapshot(&self, record: &CheckpointRecord) -> &ParamStore {
        &self.snapshots[record.epoch - 1]
    }

    /// Unpenalized runs keep their most accurate epoch; penalized runs apply
    /// the selection rule against `base_accuracy`.
    pub fn select(&self, lambda: f64, base_accuracy: Option<f64>, rule: SelectionRule) -> Result<Selection> {
        match base_accuracy {
            Some(base) if lambda > 0.0 => select_checkpoint(&self.records, base, rule),
            _ => Ok(Selection {
                record: most_accurate(&self.records)?,
                no_qualifier: false,
            }),
        }
    }
}

/// Hooks and inputs beyond the config.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Attention of the reference model per training example, for the KL
    /// penalty.
    pub reference: Option<&'a [Vec<f64>]>,
    /// Continue from this state; the model must already hold the weights of
    /// epoch `epochs_done`, and `snapshots` those of every earlier epoch.
    pub resume: Option<(TrainState, Vec<ParamStore>)>,
    /// Called after every epoch with the new state and weights.
    pub on_epoch: Option<&'a mut dyn FnMut(&TrainState, &ParamStore) -> Result<()>>,
}

trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn recurrent(&self) -> bool;
}

impl Trainable for Classifier {
    fn store(&self) -> &ParamStore {
        &self.params
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn recurrent(&self) -> bool {
        self.config().family == Family::Recurrent
    }
}

impl Trainable for Seq2Seq {
    fn store(&self) -> &ParamStore {
        &self.params
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn recurrent(&self) -> bool {
        true
    }
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence {
            epoch,
            batch,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn run<M: Trainable>(
    model: &mut M,
    n_train: usize,
    cfg: &TrainConfig,
    mut opts: TrainOptions,
    batch_loss: impl Fn(&M, &[usize], &mut ChaCha8Rng) -> Result<(Gradients, f64)>,
    evaluate: impl Fn(&M) -> Result<(f64, f64)>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let (mut state, mut snapshots) = match opts.resume.take() {
        Some((state, snaps)) => {
            if snaps.len() != state.epochs_done || state.records.len() != state.epochs_done {
                return Err(Error::Contract("resume state does not match its snapshots".into()));
            }
            (state, snaps)
        }
        None => (
            TrainState {
                epochs_done: 0,
                adam: Adam::new(model.store(), cfg.learning_rate),
                records: Vec::new(),
            },
            Vec::new(),
        ),
    };
    for epoch in state.epochs_done + 1..=cfg.epochs {
        let mut rng = cfg.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (grads, loss) = batch_loss(model, idx, &mut rng).map_err(|e| diverged(e, epoch, bi))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi, loss });
            }
            let store = model.store_mut();
            grads.accumulate_into(store);
            if let (Some(max), true) = (cfg.clip_norm, model.recurrent()) {
                clip_grad_norm(model.store_mut(), max);
            }
            let store = model.store_mut();
            state.adam.step(store);
            store.zero_grad();
            loss_sum += loss;
            batches += 1;
        }
        let (accuracy, mass) = evaluate(model)?;
        let mut record = CheckpointRecord::new(epoch, accuracy, mass);
        record.train_loss = loss_sum / batches as f64;
        state.records.push(record);
        state.epochs_done = epoch;
        snapshots.push(model.store().clone());
        if let Some(hook) = opts.on_epoch.as_mut() {
            hook(&state, model.store())?;
        }
    }
    Ok(TrainRun {
        records: state.records.clone(),
        snapshots,
        state,
    })
}

/// Per-example penalty `[B]` for a classifier batch.
fn classifier_penalty(
    tape: &mut Tape,
    out: &crate::models::ClassifierOutput,
    masks: &[ImpermissibleMask],
    cfg: &TrainConfig,
    reference: Option<&[&Vec<f64>]>,
) -> Result<Var> {
    let pm = out.penalty_mask(masks)?;
    match cfg.penalty {
        PenaltyVariant::Single => {
            if out.alphas.len() != 1 {
                return Err(Error::Contract(format!(
                    "single-distribution penalty on a model with {} attention heads; use multihead-mean or multihead-max",
                    out.alphas.len()
                )));
            }
            penalty_single(tape, out.alphas[0], &pm, cfg.lambda)
        }
        PenaltyVariant::MultiheadMean => penalty_multihead_mean(tape, &out.alphas, &pm, cfg.lambda),
        PenaltyVariant::MultiheadMax => penalty_multihead_max(tape, &out.alphas, &pm, cfg.lambda),
        PenaltyVariant::KlAdversarial => {
            let rows = reference.ok_or_else(|| Error::Contract("KL penalty needs reference attention".into()))?;
            if out.alphas.len() != 1 {
                return Err(Error::Contract("KL penalty needs a single attention distribution".into()));
            }
            let cols = out.offset + out.batch.width;
            let mut old = vec![0.0; out.batch.size * cols];
            for (b, r) in rows.iter().enumerate() {
                let expect = out.offset + out.batch.lens[b];
                if r.len() != expect {
                    return Err(Error::shape("kl_reference", format!("{} weights for {expect} positions", r.len())));
                }
                old[b * cols..b * cols + r.len()].copy_from_slice(r);
            }
            penalty_kl_adversarial(tape, out.alphas[0], &old, cfg.lambda)
        }
    }
}

/// Batch-mean cross-entropy plus, when `λ > 0`, the batch-mean penalty.
/// `reference` holds the KL reference attention per example.
pub fn classifier_loss(
    tape: &mut Tape,
    model: &Classifier,
    examples: &[&LabeledExample],
    cfg: &TrainConfig,
    reference: Option<&[&Vec<f64>]>,
) -> Result<Var> {
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let masks: Vec<ImpermissibleMask> = examples.iter().map(|e| e.mask.clone()).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let out = model.forward(tape, &seqs, Some(&masks), &AttentionOverride::Off)?;
    let ce = tape.cross_entropy(out.logits, &labels)?;
    let mut loss = tape.mean(ce)?;
    if cfg.lambda > 0.0 && !out.alphas.is_empty() {
        let pen = classifier_penalty(tape, &out, &masks, cfg, reference)?;
        let pen = tape.mean(pen)?;
        loss = tape.add(loss, pen)?;
    }
    Ok(loss)
}

/// Seq2seq objective: cross-entropy averaged over each example's steps
/// (target plus `</s>`), plus the per-step penalty against that step's gold
/// alignment averaged over the target length; both then averaged over the
/// batch. `rng` drives teacher forcing.
pub fn seq2seq_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &Seq2Seq,
    examples: &[&Seq2SeqExample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Var> {
    let srcs: Vec<&[usize]> = examples.iter().map(|e| e.src.as_slice()).collect();
    let tgts: Vec<&[usize]> = examples.iter().map(|e| e.tgt.as_slice()).collect();
    let out = model.forward(tape, &srcs, &tgts, cfg.teacher_forcing_ratio, rng)?;
    let b = examples.len();
    let width = out.source.width;
    let masks: Vec<Vec<Vec<bool>>> = examples.iter().map(|e| step_masks(e)).collect();

    let mut total: Option<Var> = None;
    for t in 0..out.logits.len() {
        let ce = tape.cross_entropy(out.logits[t], &out.targets[t])?;
        let w: Vec<f64> = (0..b)
            .map(|bi| {
                if out.step_valid[t][bi] {
                    1.0 / (examples[bi].tgt.len() + 1) as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mut term = tape.mul_const(ce, w)?;
        if cfg.lambda > 0.0 {
            if let Some(alpha) = out.alphas[t] {
                let mut flat = vec![false; b * width];
                let mut pw = vec![0.0; b];
                for bi in 0..b {
                    if let Some(m) = masks[bi].get(t) {
                        flat[bi * width..bi * width + m.len()].copy_from_slice(m);
                        pw[bi] = 1.0 / examples[bi].tgt.len() as f64;
                    }
                }
                let pen = penalty_single(tape, alpha, &flat, cfg.lambda)?;
                let pen = tape.mul_const(pen, pw)?;
                term = tape.add(term, pen)?;
            }
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let per_example = total.ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    tape.mean(per_example)
}

/// Trains with batch-mean cross-entropy plus batch-mean penalty; records dev
/// accuracy and dev attention mass after every epoch. The recorded mass is
/// the max over heads for the max-variant penalty and the mean otherwise.
pub fn train_classifier(
    model: &mut Classifier,
    train: &ClassificationDataset,
    dev: &ClassificationDataset,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainRun> {
    if dev.examples.is_empty() {
        return Err(Error::InvalidInput("dev set is empty".into()));
    }
    if let Some(r) = opts.reference {
        if r.len() != train.examples.len() {
            return Err(Error::shape("kl_reference", format!("{} rows for {} examples", r.len(), train.examples.len())));
        }
    }
    let reference = opts.reference;
    let use_max = cfg.penalty == PenaltyVariant::MultiheadMax;
    run(
        model,
        train.examples.len(),
        cfg,
        opts,
        |m: &Classifier, idx, _rng| {
            let mut tape = Tape::new(&m.params);
            let exs: Vec<&LabeledExample> = idx.iter().map(|&i| &train.examples[i]).collect();
            let rows: Option<Vec<&Vec<f64>>> = reference.map(|r| idx.iter().map(|&i| &r[i]).collect());
            let loss = classifier_loss(&mut tape, m, &exs, cfg, rows.as_deref())?;
            let value = tape.data(loss)[0];
            Ok((tape.backward(loss)?, value))
        },
        |m: &Classifier| {
            let eval = evaluate_classifier(m, dev, &AttentionOverride::Off)?;
            let mass = if use_max {
                eval.mass.max_over_heads
            } else {
                eval.mass.mean_over_heads
            };
            Ok((eval.accuracy, mass))
        },
    )
}

/// Seq2seq training with [`seq2seq_loss`]; records dev token accuracy and
/// dev gold-alignment mass after every epoch.
pub fn train_seq2seq(
    model: &mut Seq2Seq,
    train: &Seq2SeqDataset,
    dev: &Seq2SeqDataset,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainRun> {
    if dev.examples.is_empty() {
        return Err(Error::InvalidInput("dev set is empty".into()));
    }
    if cfg.lambda > 0.0 && cfg.penalty == PenaltyVariant::KlAdversarial {
        return Err(Error::InvalidInput("the KL penalty is only implemented for classifiers".into()));
    }
    run(
        model,
        train.examples.len(),
        cfg,
        opts,
        |m: &Seq2Seq, idx, rng| {
            let mut tape = Tape::new(&m.params);
            let exs: Vec<&Seq2SeqExample> = idx.iter().map(|&i| &train.examples[i]).collect();
            let loss = seq2seq_loss(&mut tape, m, &exs, cfg, rng)?;
            let value = tape.data(loss)[0];
            Ok((tape.backward(loss)?, value))
        },
        |m: &Seq2Seq| {
            let eval = evaluate_seq2seq(m, dev)?;
            Ok((eval.token_accuracy, eval.attention_mass))
        },
    )
}
