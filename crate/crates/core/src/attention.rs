//! Dot-product attention, impermissible-token penalties, and the restricted
//! self-attention mask used by the transformer classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Binary vector over source positions; `true` marks an impermissible token.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpermissibleMask(pub Vec<bool>);

impl ImpermissibleMask {
    pub fn zeros(n: usize) -> Self {
        ImpermissibleMask(vec![false; n])
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidInput(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(ImpermissibleMask)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }
}

impl AsRef<[bool]> for ImpermissibleMask {
    fn as_ref(&self) -> &[bool] {
        &self.0
    }
}

/// Attention distributions a model produced for one input.
///
/// `heads` holds one distribution per attention head (classifiers); `steps`
/// holds one per decoding step (encoder-decoder models).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    #[serde(default)]
    pub heads: Vec<Vec<f64>>,
    #[serde(default)]
    pub steps: Vec<Vec<f64>>,
}

impl AttentionRecord {
    pub fn single(alpha: Vec<f64>) -> Self {
        AttentionRecord {
            heads: vec![alpha],
            steps: Vec::new(),
        }
    }

    /// Checks that every vector is a distribution over the positions where
    /// `valid` holds.
    pub fn validate(&self, valid: &[bool], tol: f64) -> Result<()> {
        for alpha in self.heads.iter().chain(&self.steps) {
            if alpha.len() != valid.len() {
                return Err(Error::shape("attention_record", format!("{} vs {}", alpha.len(), valid.len())));
            }
            if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidInput("attention weight outside [0, 1]".into()));
            }
            let s: f64 = alpha.iter().zip(valid).filter(|(_, &v)| v).map(|(a, _)| a).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidInput(format!("attention sums to {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyVariant {
    Single,
    MultiheadMean,
    MultiheadMax,
    KlAdversarial,
}

impl std::str::FromStr for PenaltyVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(PenaltyVariant::Single),
            "multihead-mean" | "mean" => Ok(PenaltyVariant::MultiheadMean),
            "multihead-max" | "max" => Ok(PenaltyVariant::MultiheadMax),
            "kl-adversarial" | "kl" => Ok(PenaltyVariant::KlAdversarial),
            other => Err(Error::InvalidInput(format!("unknown penalty variant {other}"))),
        }
    }
}

impl std::fmt::Display for PenaltyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PenaltyVariant::Single => "single",
            PenaltyVariant::MultiheadMean => "multihead-mean",
            PenaltyVariant::MultiheadMax => "multihead-max",
            PenaltyVariant::KlAdversarial => "kl-adversarial",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub variant: PenaltyVariant,
    /// Attention of the unmanipulated model, one vector per training example.
    /// Required by, and only by, the KL-adversarial variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_alphas: Option<Vec<Vec<f64>>>,
}

impl PenaltyConfig {
    pub fn new(lambda: f64, variant: PenaltyVariant) -> Self {
        PenaltyConfig {
            lambda,
            variant,
            reference_alphas: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        let needs_ref = self.variant == PenaltyVariant::KlAdversarial;
        if needs_ref != self.reference_alphas.is_some() {
            return Err(Error::InvalidInput(
                "reference attention is required exactly for the kl-adversarial variant".into(),
            ));
        }
        Ok(())
    }
}

fn flat_mask(tape: &Tape, alpha: Var, m: &[bool], op: &'static str) -> Result<Vec<f64>> {
    let n = tape.data(alpha).len();
    if m.len() != n {
        return Err(Error::shape(op, format!("mask of {} for alpha {:?}", m.len(), tape.shape(alpha))));
    }
    Ok(m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

/// Dot-product attention of `query` over `keys`, reading `values`.
///
/// Accepts a single instance (`query [d]`, `keys/values [n, d]`) or a batch
/// (`[B, d]`, `[B, n, d]`). `valid` marks non-pad positions (same layout as
/// the returned `alpha`). Returns `(context, alpha)`.
pub fn dot_attention(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    values: Var,
    valid: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let single = tape.shape(keys).len() == 2;
    let (q, k, v) = if single {
        let (ks, vs) = (tape.shape(keys).to_vec(), tape.shape(values).to_vec());
        if ks[0] == 0 {
            return Err(Error::InvalidInput("attention over an empty sequence".into()));
        }
        let qd = tape.data(query).len();
        let q = tape.reshape(query, vec![1, qd])?;
        let k = tape.reshape(keys, vec![1, ks[0], ks[1]])?;
        let v = tape.reshape(values, [vec![1], vs.clone()].concat())?;
        (q, k, v)
    } else {
        (query, keys, values)
    };
    let (ks, vs) = (tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if vs.len() != 3 || ks[0] != vs[0] || ks[1] != vs[1] {
        return Err(Error::shape("dot_attention", format!("keys {ks:?} vs values {vs:?}")));
    }
    if ks[1] == 0 {
        return Err(Error::InvalidInput("attention over an empty sequence".into()));
    }
    let scores = tape.batched_scores(k, q)?;
    let alpha = tape.softmax(scores, valid.map(<[bool]>::to_vec))?;
    let context = tape.batched_context(alpha, v)?;
    if single {
        let d = vs[2];
        let n = ks[1];
        let context = tape.reshape(context, vec![d])?;
        let alpha = tape.reshape(alpha, vec![n])?;
        Ok((context, alpha))
    } else {
        Ok((context, alpha))
    }
}

/// `αᵀm` for one distribution.
pub fn attention_mass(alpha: &[f64], m: &ImpermissibleMask) -> Result<f64> {
    if alpha.len() != m.len() {
        return Err(Error::shape("attention_mass", format!("{} vs {}", alpha.len(), m.len())));
    }
    Ok(alpha.iter().zip(&m.0).filter(|(_, &b)| b).map(|(a, _)| a).sum())
}

/// Differentiable `αᵀm` over the last dimension of `alpha`.
pub fn mass(tape: &mut Tape, alpha: Var, m: &[bool]) -> Result<Var> {
    let mf = flat_mask(tape, alpha, m, "mass")?;
    let masked = tape.mul_const(alpha, mf)?;
    tape.sum_last(masked)
}

/// `log(1 - αᵀm)` with the argument clamped away from zero.
fn log_permissible(tape: &mut Tape, alpha: Var, m: &[bool]) -> Result<Var> {
    let am = mass(tape, alpha, m)?;
    let rest = tape.one_minus(am)?;
    tape.log(rest)
}

/// `R = -λ log(1 - αᵀm)`, one value per distribution in `alpha`.
pub fn penalty_single(tape: &mut Tape, alpha: Var, m: &[bool], lambda: f64) -> Result<Var> {
    let lp = log_permissible(tape, alpha, m)?;
    tape.scale(lp, -lambda)
}

/// `R = -(λ/|H|) Σ_h log(1 - α_hᵀm)`.
pub fn penalty_multihead_mean(tape: &mut Tape, alphas: &[Var], m: &[bool], lambda: f64) -> Result<Var> {
    if alphas.is_empty() {
        return Err(Error::Contract("multi-head penalty needs at least one head".into()));
    }
    let mut total = log_permissible(tape, alphas[0], m)?;
    for &a in &alphas[1..] {
        let lp = log_permissible(tape, a, m)?;
        total = tape.add(total, lp)?;
    }
    tape.scale(total, -lambda / alphas.len() as f64)
}

/// `R = -λ min_h log(1 - α_hᵀm)`; gradient reaches only the head with the
/// largest impermissible mass (lowest index on ties).
pub fn penalty_multihead_max(tape: &mut Tape, alphas: &[Var], m: &[bool], lambda: f64) -> Result<Var> {
    if alphas.is_empty() {
        return Err(Error::Contract("multi-head penalty needs at least one head".into()));
    }
    let mut masses = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let am = mass(tape, a, m)?;
        let lead = tape.shape(am).to_vec();
        let mut col = lead.clone();
        col.push(1);
        masses.push(tape.reshape(am, col)?);
    }
    let stacked = tape.concat(&masses)?;
    let worst = tape.row_max(stacked)?;
    let rest = tape.one_minus(worst)?;
    let lp = tape.log(rest)?;
    tape.scale(lp, -lambda)
}

/// `R' = -λ KL(α_new ‖ α_old)` with `α_old` held fixed; `0 log 0 = 0`.
pub fn penalty_kl_adversarial(tape: &mut Tape, alpha_new: Var, alpha_old: &[f64], lambda: f64) -> Result<Var> {
    let new = tape.data(alpha_new);
    if new.len() != alpha_old.len() {
        return Err(Error::shape("penalty_kl_adversarial", format!("{} vs {}", new.len(), alpha_old.len())));
    }
    for (i, (&p, &q)) in new.iter().zip(alpha_old).enumerate() {
        if q <= 0.0 && p > 0.0 {
            return Err(Error::UndefinedDivergence { position: i, value: p });
        }
    }
    let log_old: Vec<f64> = alpha_old.iter().map(|&q| if q > 0.0 { q.ln() } else { 0.0 }).collect();
    let shape = tape.shape(alpha_new).to_vec();
    let log_new = tape.log(alpha_new)?;
    let old = tape.constant(crate::autodiff::Tensor::new(shape, log_old)?)?;
    let ratio = tape.sub(log_new, old)?;
    let terms = tape.mul(alpha_new, ratio)?;
    let kl = tape.sum_last(terms)?;
    tape.scale(kl, -lambda)
}

/// Boolean `n × n` matrix; `allowed(i, j)` means token `i` may attend to `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfAttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl SelfAttentionMask {
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.allowed.chunks(self.n).map(|r| r.iter().map(|&b| b as u8).collect()).collect()
    }
}

/// The CLS token reads every position; every other token reads only the
/// non-CLS positions on its own side of the impermissible/permissible split.
pub fn restricted_self_attention_mask(n: usize, m: &ImpermissibleMask, cls_index: usize) -> Result<SelfAttentionMask> {
    if m.len() != n || cls_index >= n {
        return Err(Error::shape(
            "restricted_self_attention_mask",
            format!("n={n}, mask len {}, cls {cls_index}", m.len()),
        ));
    }
    if m.0[cls_index] {
        return Err(Error::InvalidInput("the CLS position cannot be impermissible".into()));
    }
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            allowed[i * n + j] = i == cls_index || (j != cls_index && m.0[i] == m.0[j]);
        }
    }
    Ok(SelfAttentionMask { n, allowed })
}
