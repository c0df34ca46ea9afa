//! Experiment configuration: a TOML document plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use attnlab::attention::PenaltyVariant;
use attnlab::models::{AttentionVariant, Cell, ClassifierConfig, Family, Seq2SeqConfig};
use attnlab::tasks::{GeneratorSpec, TaskKind};
use attnlab::training::sweep::SweepModel;
use attnlab::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory name under `outdir`; derived from the settings when unset.
    pub run_id: Option<String>,
    pub outdir: PathBuf,
    /// Seed for model initialization and batch order. Also the data seed
    /// unless `data.seed` is set.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sweep: SweepSection,
    /// Dev accuracy of the unpenalized run, for checkpoint selection.
    pub base_accuracy: Option<f64>,
    /// Run directory of the unpenalized run. Supplies `base_accuracy` when
    /// that is unset and the reference attention for the KL penalty.
    pub base_run: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: None,
            outdir: PathBuf::from("runs"),
            seed: 0,
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sweep: SweepSection::default(),
            base_accuracy: None,
            base_run: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskKind,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: Option<u64>,
    /// Classification corpus files used instead of a generator.
    pub corpus: Option<CorpusPaths>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: TaskKind::GenderBios,
            n_train: 20_000,
            n_dev: 2_000,
            n_test: 2_000,
            max_len: 16,
            vocab_size: 200,
            seed: None,
            corpus: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// One impermissible token per line.
    pub lexicon: PathBuf,
}

/// Architecture settings. Unset sizes take the model's own defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Classifier family; ignored for seq2seq tasks.
    pub family: Option<Family>,
    pub cell: Option<Cell>,
    pub variant: Option<AttentionVariant>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub model_dim: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub restricted_mask: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub baselines: bool,
    /// Classifier rows as `family:penalty`, e.g. `transformer:multihead-max`.
    /// Empty means the configured model with the configured penalty.
    pub models: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            lambdas: vec![0.0, 0.1, 1.0],
            seeds: (0..5).collect(),
            jobs: 1,
            baselines: true,
            models: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("serializing config")
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn generator(&self, n_examples: usize) -> GeneratorSpec {
        GeneratorSpec::new(self.data.task, n_examples, self.data.max_len, self.data.vocab_size, self.data_seed())
    }

    pub fn family(&self) -> Family {
        self.model.family.unwrap_or(Family::Recurrent)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn classifier_config(&self, family: Family, vocab_size: usize, num_classes: usize) -> ClassifierConfig {
        let m = &self.model;
        let mut c = ClassifierConfig::new(family, vocab_size, num_classes, self.seed);
        set(&mut c.cell, m.cell);
        set(&mut c.variant, m.variant);
        set(&mut c.embed_dim, m.embed_dim);
        set(&mut c.hidden_dim, m.hidden_dim);
        set(&mut c.layers, m.layers);
        set(&mut c.heads, m.heads);
        set(&mut c.model_dim, m.model_dim);
        set(&mut c.ffn_dim, m.ffn_dim);
        set(&mut c.restricted_mask, m.restricted_mask);
        c
    }

    pub fn seq2seq_config(&self, vocab_size: usize) -> Seq2SeqConfig {
        let m = &self.model;
        let mut c = Seq2SeqConfig::new(vocab_size, self.seed);
        set(&mut c.cell, m.cell);
        set(&mut c.variant, m.variant);
        set(&mut c.embed_dim, m.embed_dim);
        set(&mut c.hidden_dim, m.hidden_dim);
        c
    }

    /// Models a sweep trains, resolved against the data's vocabulary.
    pub fn sweep_models(&self, vocab_size: usize, num_classes: usize) -> anyhow::Result<Vec<SweepModel>> {
        if self.data.task.is_seq2seq() {
            return Ok(vec![SweepModel::seq2seq(self.seq2seq_config(vocab_size))]);
        }
        if self.sweep.models.is_empty() {
            let c = self.classifier_config(self.family(), vocab_size, num_classes);
            return Ok(vec![SweepModel::classifier(c, self.train.penalty)]);
        }
        self.sweep
            .models
            .iter()
            .map(|entry| {
                let (family, penalty) = entry.split_once(':').unwrap_or((entry, "single"));
                let family: Family = family.parse().map_err(|e| ConfigError(format!("sweep model {entry}: {e}")))?;
                let penalty: PenaltyVariant = penalty.parse().map_err(|e| ConfigError(format!("sweep model {entry}: {e}")))?;
                let c = self.classifier_config(family, vocab_size, num_classes);
                Ok(SweepModel::classifier(c, penalty))
            })
            .collect()
    }

    /// Validates everything that does not depend on the data.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.data.n_train == 0 || self.data.n_dev == 0 || self.data.n_test == 0 {
            return Err(ConfigError("data.n_train, n_dev and n_test must be positive".into()).into());
        }
        if self.data.corpus.is_some() && self.data.task.is_seq2seq() {
            return Err(ConfigError("corpus files are only supported for classification tasks".into()).into());
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(ConfigError(format!("run_id {id:?} is not a plain directory name")).into());
            }
        }
        Ok(())
    }

    pub fn model_label(&self) -> String {
        if self.data.task.is_seq2seq() {
            format!("seq2seq-{}", self.model.variant.unwrap_or_default())
        } else {
            self.family().name().to_string()
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses a comma-separated list.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| ConfigError(format!("bad list entry {s:?}: {e}")).into()))
        .collect()
}
