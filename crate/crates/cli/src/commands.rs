//! The five subcommands. Each works inside `<outdir>/<run-id>/` and returns
//! that directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use attnlab::attention::PenaltyVariant;
use attnlab::autodiff::checkpoint::Checkpoint;
use attnlab::autodiff::ParamStore;
use attnlab::diagnostics::{
    alignment_hit_rate, decode_limit, embedding_norm_ratio, evaluate_classifier, evaluate_seq2seq, zero_and_eval,
    HeatmapMatrix, MetricsReport,
};
use attnlab::models::{AttentionOverride, Classifier, Family, Seq2Seq, SOURCE_OFFSET};
use attnlab::tasks::{
    generate, load_corpus, load_lexicon, read_classification, write_classification, write_seq2seq, ClassificationDataset,
    Dataset, GeneratorSpec, Seq2SeqDataset, Split, TaskKind, Vocab,
};
use attnlab::training::sweep::{reference_attention, sweep as run_sweep, SweepData, SweepSpec};
use attnlab::training::{checkpoint_name, train_classifier, train_seq2seq, CheckpointRecord, TrainOptions, TrainRun, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::rundir::{claim, load_config, read_json, write_atomic, write_json, Claim};
use crate::{ConfigError, DataError};

const STATE_FILE: &str = "state.json";
const MODEL_FILE: &str = "model.json";
const METRICS_FILE: &str = "metrics.json";
const SELECTION_FILE: &str = "selection.json";

/// Counts and mask coverage of generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskKind,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Impermissible lexicon size (classification only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon_size: Option<usize>,
    pub splits: Vec<SplitStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: Split,
    pub file: String,
    pub count: usize,
    /// Fraction of tokens (or of source positions per target step, for
    /// seq2seq) that are impermissible.
    pub mask_coverage: f64,
    /// Every alignment is a permutation of the source (seq2seq only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bijective: Option<bool>,
}

/// The checkpoint a training run kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub epoch: usize,
    pub dev_accuracy: f64,
    pub dev_attention_mass: f64,
    pub no_qualifier: bool,
    pub base_accuracy: Option<f64>,
}

/// Diagnostics for seq2seq runs beyond the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Rows whose largest weight sits on the gold source position.
    pub hit_rate: f64,
    /// Rows whose largest weight is at most two positions from gold.
    pub hit_rate_within_2: f64,
}

pub fn default_run_id(cfg: &ExperimentConfig, command: &str) -> String {
    let task = cfg.data.task.name();
    match command {
        "gen" => format!("{task}-data-s{}", cfg.data_seed()),
        "sweep" => format!("{task}-sweep"),
        _ => format!(
            "{task}-{}-{}-l{}-s{}",
            cfg.model_label(),
            cfg.train.penalty,
            cfg.train.lambda,
            cfg.seed
        ),
    }
}

fn run_id(cfg: &ExperimentConfig, command: &str) -> String {
    cfg.run_id.clone().unwrap_or_else(|| default_run_id(cfg, command))
}

fn split_size(cfg: &ExperimentConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.data.n_train,
        Split::Val => cfg.data.n_dev,
        Split::Test => cfg.data.n_test,
    }
}

fn generated(cfg: &ExperimentConfig, split: Split) -> anyhow::Result<Dataset> {
    let spec: GeneratorSpec = cfg.generator(split_size(cfg, split));
    generate(&spec, split).map_err(|e| ConfigError(format!("cannot generate {} {}: {e}", cfg.data.task, split.name())).into())
}

/// Train, dev and test splits from the generator or the corpus files.
pub fn load_data(cfg: &ExperimentConfig) -> anyhow::Result<SweepData> {
    if let Some(paths) = &cfg.data.corpus {
        let data_err = |p: &Path, e: attnlab::Error| DataError(format!("{}: {e}", p.display()));
        let lexicon = load_lexicon(&paths.lexicon).map_err(|e| data_err(&paths.lexicon, e))?;
        let train = load_corpus(&paths.train, &lexicon).map_err(|e| data_err(&paths.train, e))?;
        let mut vocab: Vocab = train.vocab.clone();
        let dev = read_classification(&paths.dev, &lexicon, &mut vocab, false).map_err(|e| data_err(&paths.dev, e))?;
        let test = read_classification(&paths.test, &lexicon, &mut vocab, false).map_err(|e| data_err(&paths.test, e))?;
        let classes = train.num_classes.max(dev.num_classes).max(test.num_classes);
        let fix = |d: ClassificationDataset| ClassificationDataset {
            num_classes: classes,
            lexicon: train.lexicon.clone(),
            ..d
        };
        return Ok(SweepData::Classification {
            dev: fix(dev),
            test: fix(test),
            train: fix(train.clone()),
        });
    }
    let [train, dev, test] = [Split::Train, Split::Val, Split::Test].map(|s| generated(cfg, s));
    Ok(match (train?, dev?, test?) {
        (Dataset::Classification(train), Dataset::Classification(dev), Dataset::Classification(test)) => {
            SweepData::Classification { train, dev, test }
        }
        (Dataset::Seq2Seq(train), Dataset::Seq2Seq(dev), Dataset::Seq2Seq(test)) => SweepData::Seq2Seq { train, dev, test },
        _ => unreachable!("one task yields one kind of dataset"),
    })
}

pub fn gen(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<PathBuf> {
    cfg.validate()?;
    if cfg.data.corpus.is_some() {
        return Err(ConfigError("gen writes generated data; unset data.corpus".into()).into());
    }
    let dir = match claim(cfg, &run_id(cfg, "gen"), force, "manifest.json")? {
        Claim::Done(dir) => return Ok(dir),
        Claim::Fresh(dir) => dir,
    };
    let mut splits = Vec::new();
    let mut lexicon_size = None;
    let mut vocab_size = 0;
    for split in Split::ALL {
        let file = format!("{}.jsonl", split.name());
        let path = dir.join(&file);
        let stats = match generated(cfg, split)? {
            Dataset::Classification(d) => {
                write_classification(&path, &d)?;
                lexicon_size = Some(d.lexicon.len());
                vocab_size = d.vocab.len();
                SplitStats {
                    split,
                    file,
                    count: d.examples.len(),
                    mask_coverage: d.mask_coverage(),
                    bijective: None,
                }
            }
            Dataset::Seq2Seq(d) => {
                write_seq2seq(&path, &d)?;
                vocab_size = d.vocab.len();
                SplitStats {
                    split,
                    file,
                    count: d.examples.len(),
                    mask_coverage: d.mask_coverage(),
                    bijective: Some(d.examples.iter().all(|e| e.alignment_is_bijective())),
                }
            }
        };
        splits.push(stats);
    }
    let manifest = Manifest {
        task: cfg.data.task,
        max_len: cfg.data.max_len,
        vocab_size,
        seed: cfg.data_seed(),
        lexicon_size,
        splits,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("{}.json", checkpoint_name(epoch)))
}

/// Saves one epoch's weights, then the state that refers to them.
fn save_epoch(dir: &Path, state: &TrainState, params: &ParamStore) -> attnlab::Result<()> {
    let path = checkpoint_path(dir, state.epochs_done);
    std::fs::create_dir_all(path.parent().expect("checkpoint path has a parent"))?;
    Checkpoint::from_store(params, serde_json::Value::Null).save(&path)?;
    write_atomic(&dir.join(STATE_FILE), serde_json::to_string(state)?.as_bytes())?;
    Ok(())
}

/// State and per-epoch weights of an interrupted run, shaped like `template`.
fn load_resume(dir: &Path, template: &ParamStore) -> anyhow::Result<Option<(TrainState, Vec<ParamStore>)>> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let state: TrainState = read_json(&path)?;
    let snapshots = (1..=state.epochs_done)
        .map(|e| {
            let mut store = template.clone();
            Checkpoint::load(&checkpoint_path(dir, e))?.load_into(&mut store)?;
            Ok(store)
        })
        .collect::<attnlab::Result<Vec<_>>>()
        .context("loading checkpoints to resume from")?;
    Ok(Some((state, snapshots)))
}

fn base_accuracy(cfg: &ExperimentConfig) -> anyhow::Result<Option<f64>> {
    if let Some(a) = cfg.base_accuracy {
        return Ok(Some(a));
    }
    match &cfg.base_run {
        Some(dir) => {
            let sel: SelectionFile = read_json(&dir.join(SELECTION_FILE))
                .map_err(|e| ConfigError(format!("base run {}: {e:#}", dir.display())))?;
            Ok(Some(sel.dev_accuracy))
        }
        None => Ok(None),
    }
}

fn finish_selection(
    dir: &Path,
    cfg: &ExperimentConfig,
    run: &TrainRun,
) -> anyhow::Result<(CheckpointRecord, SelectionFile)> {
    let base = base_accuracy(cfg)?;
    if cfg.train.lambda > 0.0 && base.is_none() {
        eprintln!("warning: no base accuracy given; keeping the most accurate epoch");
    }
    let sel = run.select(cfg.train.lambda, base, cfg.train.selection)?;
    write_json(&dir.join("records.json"), &run.records)?;
    let file = SelectionFile {
        epoch: sel.record.epoch,
        dev_accuracy: sel.record.accuracy,
        dev_attention_mass: sel.record.attention_mass,
        no_qualifier: sel.no_qualifier,
        base_accuracy: base,
    };
    write_json(&dir.join(SELECTION_FILE), &file)?;
    Ok((sel.record, file))
}

pub fn train(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<PathBuf> {
    cfg.validate()?;
    let dir = match claim(cfg, &run_id(cfg, "train"), force, METRICS_FILE)? {
        Claim::Done(dir) => return Ok(dir),
        Claim::Fresh(dir) => dir,
    };
    let tc = cfg.train_config();
    let mut hook = |s: &TrainState, p: &ParamStore| save_epoch(&dir, s, p);
    let metrics = match load_data(cfg)? {
        SweepData::Classification { train, dev, test } => {
            let mc = cfg.classifier_config(cfg.family(), train.vocab.len(), train.num_classes);
            let mut model = Classifier::new(mc).map_err(|e| ConfigError(e.to_string()))?;
            let reference = if tc.penalty == PenaltyVariant::KlAdversarial && tc.lambda > 0.0 {
                let base = cfg
                    .base_run
                    .as_ref()
                    .ok_or_else(|| ConfigError("the KL penalty needs --base-run for its reference attention".into()))?;
                let reference_model = Classifier::from_checkpoint(&Checkpoint::load(&base.join(MODEL_FILE))?)?;
                Some(reference_attention(&reference_model, &train)?)
            } else {
                None
            };
            let resume = load_resume(&dir, &model.params)?;
            if let Some((_, snaps)) = &resume {
                if let Some(last) = snaps.last() {
                    model.params = last.clone();
                }
            }
            let opts = TrainOptions {
                reference: reference.as_deref(),
                resume,
                on_epoch: Some(&mut hook),
            };
            let run = train_classifier(&mut model, &train, &dev, &tc, opts)?;
            let (record, _) = finish_selection(&dir, cfg, &run)?;
            model.params = run.snapshot(&record).clone();
            model.to_checkpoint().save(&dir.join(MODEL_FILE))?;
            let eval = evaluate_classifier(&model, &test, &AttentionOverride::Off)?;
            let mut m = MetricsReport::from_classifier(&eval);
            if tc.penalty == PenaltyVariant::MultiheadMax {
                m.attention_mass = eval.mass.max_over_heads;
            }
            m
        }
        SweepData::Seq2Seq { train, dev, test } => {
            let mut model = Seq2Seq::new(cfg.seq2seq_config(train.vocab.len())).map_err(|e| ConfigError(e.to_string()))?;
            let resume = load_resume(&dir, &model.params)?;
            if let Some((_, snaps)) = &resume {
                if let Some(last) = snaps.last() {
                    model.params = last.clone();
                }
            }
            let opts = TrainOptions {
                resume,
                on_epoch: Some(&mut hook),
                ..Default::default()
            };
            let run = train_seq2seq(&mut model, &train, &dev, &tc, opts)?;
            let (record, _) = finish_selection(&dir, cfg, &run)?;
            model.params = run.snapshot(&record).clone();
            model.to_checkpoint().save(&dir.join(MODEL_FILE))?;
            MetricsReport::from_seq2seq(&evaluate_seq2seq(&model, &test)?)
        }
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(dir)
}

pub fn sweep(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<PathBuf> {
    cfg.validate()?;
    let dir = match claim(cfg, &run_id(cfg, "sweep"), force, "report.json")? {
        Claim::Done(dir) => return Ok(dir),
        Claim::Fresh(dir) => dir,
    };
    let data = load_data(cfg)?;
    let (vocab, classes) = match &data {
        SweepData::Classification { train, .. } => (train.vocab.len(), train.num_classes),
        SweepData::Seq2Seq { train, .. } => (train.vocab.len(), 0),
    };
    let mut spec = SweepSpec::new(
        cfg.sweep_models(vocab, classes)?,
        cfg.sweep.lambdas.clone(),
        cfg.sweep.seeds.clone(),
        cfg.train.clone(),
    );
    spec.baselines = cfg.sweep.baselines;
    spec.jobs = cfg.sweep.jobs;
    spec.validate().map_err(|e| ConfigError(e.to_string()))?;
    let report = run_sweep(&data, &spec, Some(&|line: &str| eprintln!("{line}")))?;
    write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(dir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum HeatmapFormat {
    Svg,
    Txt,
}

/// A trained run reloaded from its directory.
enum Loaded {
    Classifier(Classifier, ClassificationDataset, ClassificationDataset),
    Seq2Seq(Seq2Seq, Seq2SeqDataset),
}

/// Model plus the requested split (and the training split for classifiers).
fn load_run(dir: &Path, split: Split) -> anyhow::Result<(ExperimentConfig, Loaded)> {
    let cfg = load_config(dir)?;
    let path = dir.join(MODEL_FILE);
    if !path.exists() {
        return Err(ConfigError(format!("{} holds no trained model", dir.display())).into());
    }
    let ck = Checkpoint::load(&path)?;
    let loaded = match load_data(&cfg)? {
        SweepData::Classification { train, dev, test } => {
            let data = pick(split, train.clone(), dev, test);
            Loaded::Classifier(Classifier::from_checkpoint(&ck)?, data, train)
        }
        SweepData::Seq2Seq { train, dev, test } => Loaded::Seq2Seq(Seq2Seq::from_checkpoint(&ck)?, pick(split, train, dev, test)),
    };
    Ok((cfg, loaded))
}

fn pick<T>(split: Split, train: T, dev: T, test: T) -> T {
    match split {
        Split::Train => train,
        Split::Val => dev,
        Split::Test => test,
    }
}

fn token_labels(vocab: &Vocab, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| vocab.token(i).map(str::to_string).unwrap_or_else(|_| format!("#{i}"))).collect()
}

fn index_error(index: usize, len: usize) -> anyhow::Error {
    ConfigError(format!("example {index} is out of range for a split of {len}")).into()
}

/// Renders the attention of one example. Classifier maps have a single row
/// (one head); seq2seq maps have one row per decoded token, with the gold
/// alignment outlined.
pub fn heatmap(
    dir: &Path,
    index: usize,
    split: Split,
    format: HeatmapFormat,
    head: usize,
    out: Option<&Path>,
) -> anyhow::Result<PathBuf> {
    let (_, loaded) = load_run(dir, split)?;
    let matrix = match loaded {
        Loaded::Classifier(model, data, _) => {
            let e = data.examples.get(index).ok_or_else(|| index_error(index, data.examples.len()))?;
            let p = model
                .predict(&[e.tokens.as_slice()], Some(&[e.mask.clone()]), &AttentionOverride::Off, 1)?
                .remove(0);
            let heads = p.attention.heads.len();
            let row = p
                .attention
                .heads
                .into_iter()
                .nth(head)
                .ok_or_else(|| ConfigError(format!("head {head} requested but the model has {heads} attention heads")))?;
            let offset = usize::from(model.config().family == Family::Transformer);
            let mut cols = if offset == 1 { vec!["[CLS]".to_string()] } else { Vec::new() };
            cols.extend(token_labels(&data.vocab, &e.tokens));
            let gold: Vec<usize> = e.mask.0.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j + offset).collect();
            HeatmapMatrix::new(vec![row], cols, Some(vec![format!("head {head}")]))?.with_gold(vec![gold])?
        }
        Loaded::Seq2Seq(model, data) => {
            if !model.config().variant.has_attention() {
                return Err(ConfigError("the model has no attention to plot".into()).into());
            }
            let e = data.examples.get(index).ok_or_else(|| index_error(index, data.examples.len()))?;
            let d = model.decode_greedy(&e.src, decode_limit(e.src.len()))?;
            let mut cols = vec!["<s>".to_string()];
            cols.extend(token_labels(&data.vocab, &e.src));
            cols.push("</s>".into());
            let gold = (0..d.alphas.len())
                .map(|t| e.align.get(t).map_or(Vec::new(), |a| a.iter().map(|&i| i + SOURCE_OFFSET).collect()))
                .collect();
            HeatmapMatrix::new(d.alphas, cols, Some(token_labels(&data.vocab, &d.tokens)))?.with_gold(gold)?
        }
    };
    let (text, ext) = match format {
        HeatmapFormat::Svg => (matrix.to_svg(), "svg"),
        HeatmapFormat::Txt => (matrix.to_text(), "txt"),
    };
    // A caller-chosen path may be a pipe or device, so it is written in place.
    let path = match out {
        Some(p) => {
            std::fs::write(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))?;
            p.to_path_buf()
        }
        None => {
            let p = dir.join(format!("heatmap-{}-{index}.{ext}", split.name()));
            write_atomic(&p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))?;
            p
        }
    };
    Ok(path)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DiagnoseOptions {
    pub zeroing: bool,
    pub norms: bool,
    /// Zero without renormalizing the surviving weights.
    pub raw: bool,
}

/// Adds zeroed accuracy and the per-epoch norm-ratio series to a
/// classifier run's metrics, or writes alignment hit rates for a seq2seq
/// run. With neither flag set, everything applicable is computed.
pub fn diagnose(dir: &Path, opts: DiagnoseOptions) -> anyhow::Result<PathBuf> {
    let all = !opts.zeroing && !opts.norms;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics: MetricsReport = read_json(&metrics_path)?;
    let (_, loaded) = load_run(dir, Split::Test)?;
    match loaded {
        Loaded::Classifier(model, test, train) => {
            if (all || opts.zeroing) && model.config().variant.has_attention() {
                metrics.zeroed_accuracy = Some(zero_and_eval(&model, &test, !opts.raw)?);
            }
            if all || opts.norms {
                metrics.norm_ratio_series = Some(norm_series(dir, &model, &train.lexicon)?);
            }
            write_json(&metrics_path, &metrics)?;
            Ok(metrics_path)
        }
        Loaded::Seq2Seq(model, test) => {
            let mut rows = Vec::new();
            let mut gold = Vec::new();
            for e in &test.examples {
                let d = model.decode_greedy(&e.src, decode_limit(e.src.len()))?;
                for (t, a) in d.alphas.into_iter().enumerate() {
                    gold.push(e.align.get(t).map_or(Vec::new(), |g| g.iter().map(|&i| i + SOURCE_OFFSET).collect()));
                    rows.push(a);
                }
            }
            let report = AlignmentReport {
                hit_rate: alignment_hit_rate(&rows, &gold, 0),
                hit_rate_within_2: alignment_hit_rate(&rows, &gold, 2),
            };
            let path = dir.join("alignment.json");
            write_json(&path, &report)?;
            Ok(path)
        }
    }
}

/// Norm ratio at initialization, then after each saved epoch.
fn norm_series(dir: &Path, model: &Classifier, lexicon: &[usize]) -> anyhow::Result<Vec<f64>> {
    if lexicon.is_empty() {
        return Err(ConfigError("the task has no impermissible lexicon to measure".into()).into());
    }
    let init = Classifier::new(model.config().clone())?;
    let table = model.embedding_table();
    let mut series = vec![embedding_norm_ratio(&init.params, table, lexicon, 0)?];
    let records: Vec<CheckpointRecord> = read_json(&dir.join("records.json"))?;
    for r in &records {
        let mut store = init.params.clone();
        Checkpoint::load(&checkpoint_path(dir, r.epoch))?.load_into(&mut store)?;
        series.push(embedding_norm_ratio(&store, table, lexicon, 0)?);
    }
    Ok(series)
}

