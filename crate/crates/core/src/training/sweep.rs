//! λ × seed sweeps with per-model baselines, aggregated into a
//! table of accuracy and attention mass.

use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_classifier, train_seq2seq, TrainConfig, TrainOptions, TrainRun};
use crate::attention::PenaltyVariant;
use crate::autodiff::ParamStore;
use crate::diagnostics::{embedding_norm_ratio, evaluate_classifier, evaluate_seq2seq, MetricsReport};
use crate::error::{Error, Result};
use crate::models::{AttentionOverride, AttentionVariant, Classifier, ClassifierConfig, Family, Seq2Seq, Seq2SeqConfig};
use crate::tasks::{anonymize_dataset, ClassificationDataset, Seq2SeqDataset};

/// Train, dev and test splits of one task.
pub enum SweepData {
    Classification {
        train: ClassificationDataset,
        dev: ClassificationDataset,
        test: ClassificationDataset,
    },
    Seq2Seq {
        train: Seq2SeqDataset,
        dev: Seq2SeqDataset,
        test: Seq2SeqDataset,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Classifier(ClassifierConfig),
    Seq2Seq(Seq2SeqConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepModel {
    /// Row label in the report.
    pub name: String,
    pub model: ModelConfig,
    pub penalty: PenaltyVariant,
}

impl SweepModel {
    pub fn classifier(config: ClassifierConfig, penalty: PenaltyVariant) -> Self {
        let name = match config.family {
            Family::Transformer => format!("transformer ({})", penalty.to_string().trim_start_matches("multihead-")),
            f if penalty == PenaltyVariant::KlAdversarial => format!("{} (kl)", f.name()),
            f => f.name().to_string(),
        };
        SweepModel {
            name,
            model: ModelConfig::Classifier(config),
            penalty,
        }
    }

    pub fn seq2seq(config: Seq2SeqConfig) -> Self {
        SweepModel {
            name: format!("seq2seq {}", config.variant),
            model: ModelConfig::Seq2Seq(config),
            penalty: PenaltyVariant::Single,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub models: Vec<SweepModel>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Template for every run; `lambda`, `penalty` and `seed` are set per cell.
    pub train: TrainConfig,
    /// Add the anonymized-input row for classifiers and the uniform and
    /// no-attention rows for seq2seq models.
    pub baselines: bool,
    /// Worker threads; cells are independent.
    pub jobs: usize,
}

impl SweepSpec {
    pub fn new(models: Vec<SweepModel>, lambdas: Vec<f64>, seeds: Vec<u64>, train: TrainConfig) -> Self {
        SweepSpec {
            models,
            lambdas,
            seeds,
            train,
            baselines: true,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidInput("a sweep needs at least one model, lambda and seed".into()));
        }
        if self.jobs == 0 {
            return Err(Error::InvalidInput("jobs must be positive".into()));
        }
        for &l in &self.lambdas {
            TrainConfig { lambda: l, ..self.train.clone() }.validate()?;
        }
        Ok(())
    }
}

/// Which variant of a model a report row describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowKind {
    Penalized { lambda: f64 },
    /// Trained and evaluated with impermissible tokens replaced by a placeholder.
    Anonymized,
    /// Seq2seq ablation with the given attention variant.
    Ablation { variant: AttentionVariant },
}

/// Test-split metrics of one trained cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub selected_epoch: usize,
    pub no_qualifier: bool,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub kind: RowKind,
    /// Whether the impermissible tokens were visible to the model.
    pub impermissible_used: bool,
    /// Means over the successful seeds; `None` when every seed failed.
    pub accuracy: Option<f64>,
    pub attention_mass: Option<f64>,
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

impl SweepRow {
    fn new(model: &str, kind: RowKind, impermissible_used: bool, outcomes: Vec<(u64, Outcome)>) -> Self {
        let mut cells = Vec::new();
        let mut failures = Vec::new();
        for (seed, o) in outcomes {
            match o {
                Ok(c) => cells.push(c),
                Err(error) => failures.push(CellFailure { seed, error }),
            }
        }
        let mean = |f: fn(&CellResult) -> f64| (!cells.is_empty()).then(|| cells.iter().map(f).sum::<f64>() / cells.len() as f64);
        SweepRow {
            model: model.to_string(),
            accuracy: mean(|c| c.metrics.accuracy),
            attention_mass: mean(|c| c.metrics.attention_mass),
            kind,
            impermissible_used,
            cells,
            failures,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self.kind {
            RowKind::Penalized { lambda } => Some(lambda),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, model: &str, kind: &RowKind) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.model == model && &r.kind == kind)
    }

    /// Aligned columns: model, λ, 𝓘 used, accuracy and attention mass (both
    /// in percent), seeds that succeeded.
    pub fn to_text(&self) -> String {
        let header = ["Model", "λ", "𝓘", "Acc.", "A.M.", "Runs"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                let lambda = match &r.kind {
                    RowKind::Penalized { lambda } => format!("{lambda}"),
                    RowKind::Anonymized => "0".into(),
                    RowKind::Ablation { variant } => variant.name().into(),
                };
                let total = r.cells.len() + r.failures.len();
                [
                    r.model.clone(),
                    lambda,
                    if r.impermissible_used { "✓" } else { "✗" }.into(),
                    r.accuracy.map_or("-".into(), |a| format!("{:.1}", 100.0 * a)),
                    r.attention_mass.map_or("-".into(), percent),
                    format!("{}/{total}", r.cells.len()),
                ]
            })
            .collect();
        let width = |i: usize| {
            body.iter()
                .map(|row| row[i].chars().count())
                .chain([header[i].chars().count()])
                .max()
                .unwrap_or(0)
        };
        let widths: Vec<usize> = (0..6).map(width).collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                let pad = widths[i] - c.chars().count();
                if i == 0 {
                    let _ = write!(s, "{c}{}", " ".repeat(pad));
                } else {
                    let _ = write!(s, "  {}{c}", " ".repeat(pad));
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&header.map(String::from));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row));
            out.push('\n');
        }
        for r in &self.rows {
            for f in &r.failures {
                let _ = writeln!(out, "failed: {} {:?} seed {}: {}", r.model, r.kind, f.seed, f.error);
            }
        }
        out
    }
}

fn percent(mass: f64) -> String {
    let p = 100.0 * mass;
    if p != 0.0 && p < 0.01 {
        format!("{p:.0e}")
    } else {
        format!("{p:.2}")
    }
}

/// Trains every (model, λ, seed) cell plus baselines and evaluates the
/// selected checkpoint of each on the test split. The λ = 0 run of a seed is
/// trained first and supplies the base accuracy for the selection rule, even
/// when 0 is not among the reported lambdas. A failed cell is reported in its
/// row and does not stop the sweep. `progress` receives one line per
/// finished cell.
pub fn sweep(data: &SweepData, spec: &SweepSpec, progress: Option<&(dyn Fn(&str) + Sync)>) -> Result<SweepReport> {
    spec.validate()?;
    for m in &spec.models {
        match (&m.model, data) {
            (ModelConfig::Classifier(_), SweepData::Classification { .. }) | (ModelConfig::Seq2Seq(_), SweepData::Seq2Seq { .. }) => {}
            _ => return Err(Error::InvalidInput(format!("model {} does not fit the task", m.name))),
        }
    }
    let anonymized = match data {
        SweepData::Classification { train, dev, test } if spec.baselines => {
            Some((anonymize_dataset(train), anonymize_dataset(dev), anonymize_dataset(test)))
        }
        _ => None,
    };
    let groups: Vec<(usize, u64)> = (0..spec.models.len()).flat_map(|m| spec.seeds.iter().map(move |&s| (m, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let results: Vec<GroupResult> = pool.install(|| {
        groups
            .par_iter()
            .map(|&(m, seed)| {
                let g = run_group(data, anonymized.as_ref(), &spec.models[m], seed, spec);
                if let Some(p) = progress {
                    p(&format!("finished {} seed {seed}", spec.models[m].name));
                }
                g
            })
            .collect()
    });

    let mut rows = Vec::new();
    for (m, model) in spec.models.iter().enumerate() {
        let mine: Vec<&GroupResult> = groups
            .iter()
            .zip(&results)
            .filter(|((gm, _), _)| *gm == m)
            .map(|(_, r)| r)
            .collect();
        let take = |pick: &dyn Fn(&GroupResult) -> &Outcome| mine.iter().map(|g| (g.seed, pick(g).clone())).collect();
        for (li, &lambda) in spec.lambdas.iter().enumerate() {
            rows.push(SweepRow::new(&model.name, RowKind::Penalized { lambda }, true, take(&|g| &g.penalized[li])));
        }
        if spec.baselines {
            match model.model {
                ModelConfig::Classifier(_) => {
                    rows.push(SweepRow::new(&model.name, RowKind::Anonymized, false, take(&|g| &g.baselines[0])));
                }
                ModelConfig::Seq2Seq(_) => {
                    for (i, variant) in SEQ2SEQ_ABLATIONS.iter().enumerate() {
                        let kind = RowKind::Ablation { variant: *variant };
                        rows.push(SweepRow::new(&model.name, kind, true, take(&|g| &g.baselines[i])));
                    }
                }
            }
        }
    }
    Ok(SweepReport { rows })
}

const SEQ2SEQ_ABLATIONS: [AttentionVariant; 2] = [AttentionVariant::Uniform, AttentionVariant::NoneLast];

/// A trained cell, or the message of the error that stopped it.
type Outcome = std::result::Result<CellResult, String>;

struct GroupResult {
    seed: u64,
    penalized: Vec<Outcome>,
    baselines: Vec<Outcome>,
}

fn run_group(
    data: &SweepData,
    anonymized: Option<&(ClassificationDataset, ClassificationDataset, ClassificationDataset)>,
    model: &SweepModel,
    seed: u64,
    spec: &SweepSpec,
) -> GroupResult {
    let cfg = |lambda: f64| TrainConfig {
        lambda,
        penalty: model.penalty,
        seed,
        ..spec.train.clone()
    };
    match (&model.model, data) {
        (ModelConfig::Classifier(mc), SweepData::Classification { train, dev, test }) => {
            let mc = ClassifierConfig { seed, ..mc.clone() };
            let base = classifier_cell(&mc, train, dev, test, &cfg(0.0), None, None);
            let base_acc = base.as_ref().ok().map(|(_, acc, _)| *acc);
            let reference = match (model.penalty, &base) {
                (PenaltyVariant::KlAdversarial, Ok((_, _, m))) => Some(reference_attention(m, train).map_err(|e| e.to_string())),
                (PenaltyVariant::KlAdversarial, Err(e)) => Some(Err(format!("reference model failed: {e}"))),
                _ => None,
            };
            let penalized = spec
                .lambdas
                .iter()
                .map(|&l| {
                    if l == 0.0 {
                        return base.as_ref().map(|(c, _, _)| c.clone()).map_err(ToString::to_string);
                    }
                    let reference = match &reference {
                        Some(r) => Some(r.as_ref().map_err(Clone::clone)?.as_slice()),
                        None => None,
                    };
                    outcome(classifier_cell(&mc, train, dev, test, &cfg(l), base_acc, reference).map(|(c, _, _)| c))
                })
                .collect();
            let baselines = match anonymized {
                Some((a_train, a_dev, a_test)) => {
                    vec![outcome(classifier_cell(&mc, a_train, a_dev, a_test, &cfg(0.0), None, None).map(|(c, _, _)| c))]
                }
                None => Vec::new(),
            };
            GroupResult { seed, penalized, baselines }
        }
        (ModelConfig::Seq2Seq(mc), SweepData::Seq2Seq { train, dev, test }) => {
            let mc = Seq2SeqConfig { seed, ..mc.clone() };
            let base = seq2seq_cell(&mc, train, dev, test, &cfg(0.0), None);
            let base_acc = base.as_ref().ok().map(|(_, acc)| *acc);
            let penalized = spec
                .lambdas
                .iter()
                .map(|&l| {
                    if l == 0.0 {
                        return base.as_ref().map(|(c, _)| c.clone()).map_err(ToString::to_string);
                    }
                    outcome(seq2seq_cell(&mc, train, dev, test, &cfg(l), base_acc).map(|(c, _)| c))
                })
                .collect();
            let baselines = if spec.baselines {
                SEQ2SEQ_ABLATIONS
                    .iter()
                    .map(|&variant| {
                        let ablated = Seq2SeqConfig { variant, ..mc.clone() };
                        outcome(seq2seq_cell(&ablated, train, dev, test, &cfg(0.0), None).map(|(c, _)| c))
                    })
                    .collect()
            } else {
                Vec::new()
            };
            GroupResult { seed, penalized, baselines }
        }
        _ => unreachable!("checked in sweep"),
    }
}

fn outcome(r: Result<CellResult>) -> Outcome {
    r.map_err(|e| e.to_string())
}

/// Attention of a trained model on each training example, trimmed to the
/// example's positions.
pub fn reference_attention(model: &Classifier, train: &ClassificationDataset) -> Result<Vec<Vec<f64>>> {
    let seqs: Vec<&[usize]> = train.examples.iter().map(|e| e.tokens.as_slice()).collect();
    let preds = model.predict(&seqs, None, &AttentionOverride::Off, crate::diagnostics::EVAL_BATCH)?;
    let offset = usize::from(model.config().family == Family::Transformer);
    preds
        .into_iter()
        .zip(&train.examples)
        .map(|(p, e)| {
            let head = p
                .attention
                .heads
                .into_iter()
                .next()
                .ok_or_else(|| Error::Contract("KL penalty needs a model with attention".into()))?;
            Ok(head[..offset + e.tokens.len()].to_vec())
        })
        .collect()
}

/// Trains one classifier, selects a checkpoint and evaluates it on `test`.
/// Returns the cell, its selected dev accuracy and the selected model.
fn classifier_cell(
    mc: &ClassifierConfig,
    train: &ClassificationDataset,
    dev: &ClassificationDataset,
    test: &ClassificationDataset,
    cfg: &TrainConfig,
    base_accuracy: Option<f64>,
    reference: Option<&[Vec<f64>]>,
) -> Result<(CellResult, f64, Classifier)> {
    let mut model = Classifier::new(mc.clone())?;
    let init = model.params.clone();
    let opts = TrainOptions {
        reference,
        ..Default::default()
    };
    let run = train_classifier(&mut model, train, dev, cfg, opts)?;
    let selection = run.select(cfg.lambda, base_accuracy, cfg.selection)?;
    model.params = run.snapshot(&selection.record).clone();
    let eval = evaluate_classifier(&model, test, &AttentionOverride::Off)?;
    let mut metrics = MetricsReport::from_classifier(&eval);
    if cfg.penalty == PenaltyVariant::MultiheadMax {
        metrics.attention_mass = eval.mass.max_over_heads;
    }
    if mc.variant.has_attention() {
        metrics.zeroed_accuracy = Some(crate::diagnostics::zero_and_eval(&model, test, true)?);
    }
    if mc.family != Family::Transformer && !train.lexicon.is_empty() {
        metrics.norm_ratio_series = Some(norm_series(&model, &init, &run, &train.lexicon)?);
    }
    let cell = CellResult {
        seed: cfg.seed,
        selected_epoch: selection.record.epoch,
        no_qualifier: selection.no_qualifier,
        metrics,
    };
    Ok((cell, selection.record.accuracy, model))
}

/// Norm ratio at initialization followed by its value after every epoch.
fn norm_series(model: &Classifier, init: &ParamStore, run: &TrainRun, lexicon: &[usize]) -> Result<Vec<f64>> {
    let table = model.embedding_table();
    std::iter::once(init)
        .chain(run.snapshots.iter())
        .map(|s| embedding_norm_ratio(s, table, lexicon, 0))
        .collect()
}

fn seq2seq_cell(
    mc: &Seq2SeqConfig,
    train: &Seq2SeqDataset,
    dev: &Seq2SeqDataset,
    test: &Seq2SeqDataset,
    cfg: &TrainConfig,
    base_accuracy: Option<f64>,
) -> Result<(CellResult, f64)> {
    let mut model = Seq2Seq::new(mc.clone())?;
    let run = train_seq2seq(&mut model, train, dev, cfg, TrainOptions::default())?;
    let selection = run.select(cfg.lambda, base_accuracy, cfg.selection)?;
    model.params = run.snapshot(&selection.record).clone();
    let eval = evaluate_seq2seq(&model, test)?;
    let cell = CellResult {
        seed: cfg.seed,
        selected_epoch: selection.record.epoch,
        no_qualifier: selection.no_qualifier,
        metrics: MetricsReport::from_seq2seq(&eval),
    };
    Ok((cell, selection.record.accuracy))
}
