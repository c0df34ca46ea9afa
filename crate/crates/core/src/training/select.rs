use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics of one epoch's weights on the dev split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    /// 1-based.
    pub epoch: usize,
    /// Classification accuracy, or token accuracy for seq2seq.
    pub accuracy: f64,
    pub attention_mass: f64,
    pub train_loss: f64,
    /// Name under which the epoch's weights are stored.
    pub checkpoint: String,
}

impl CheckpointRecord {
    pub fn new(epoch: usize, accuracy: f64, attention_mass: f64) -> Self {
        CheckpointRecord {
            epoch,
            accuracy,
            attention_mass,
            train_loss: 0.0,
            checkpoint: checkpoint_name(epoch),
        }
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}")
}

/// How far below the unpenalized accuracy a checkpoint may fall.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionRule {
    pub tolerance: f64,
    /// Read `tolerance` as a fraction of the base accuracy instead of
    /// absolute accuracy points.
    pub relative: bool,
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule {
            tolerance: 0.02,
            relative: false,
        }
    }
}

impl SelectionRule {
    pub fn threshold(&self, base_accuracy: f64) -> f64 {
        if self.relative {
            base_accuracy * (1.0 - self.tolerance)
        } else {
            base_accuracy - self.tolerance
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub record: CheckpointRecord,
    /// No record met the accuracy threshold; `record` is the most accurate.
    pub no_qualifier: bool,
}

/// Slack for accuracies that equal the threshold up to rounding.
const THRESHOLD_SLACK: f64 = 1e-12;

/// Among records within tolerance of `base_accuracy`, the one with the least
/// attention mass (earliest epoch on ties). Falls back to the most accurate
/// record (earliest on ties) when none qualifies.
pub fn select_checkpoint(records: &[CheckpointRecord], base_accuracy: f64, rule: SelectionRule) -> Result<Selection> {
    if records.is_empty() {
        return Err(Error::Contract("checkpoint selection needs at least one record".into()));
    }
    let threshold = rule.threshold(base_accuracy) - THRESHOLD_SLACK;
    let best = records
        .iter()
        .filter(|r| r.accuracy >= threshold)
        .min_by(|a, b| a.attention_mass.total_cmp(&b.attention_mass).then(a.epoch.cmp(&b.epoch)));
    Ok(match best {
        Some(r) => Selection {
            record: r.clone(),
            no_qualifier: false,
        },
        None => Selection {
            record: most_accurate(records)?,
            no_qualifier: true,
        },
    })
}

/// Highest accuracy, earliest epoch on ties. Used for unpenalized runs.
pub fn most_accurate(records: &[CheckpointRecord]) -> Result<CheckpointRecord> {
    records
        .iter()
        .min_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.epoch.cmp(&b.epoch)))
        .cloned()
        .ok_or_else(|| Error::Contract("checkpoint selection needs at least one record".into()))
}
