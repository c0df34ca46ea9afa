//! Post-norm transformer encoder with a prepended CLS token and the
//! restricted self-attention mask.

use rand::Rng;

use super::{constant_matrix, override_weights, AttentionOverride, Batch, ClassifierConfig};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tasks::vocab::CLS;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

fn dense<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut R) -> (ParamId, ParamId) {
    (
        store.add_weight(format!("{name}.w"), i, o, rng),
        store.add_zeros(format!("{name}.b"), vec![o]),
    )
}

fn apply(tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (tape.param(w), tape.param(b));
    tape.linear(x, w, Some(b))
}

fn norm(tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
    let y = tape.layer_norm(x, LN_EPS)?;
    let (g, b) = (tape.param(g), tape.param(b));
    let y = tape.mul_bias(y, g)?;
    tape.add_bias(y, b)
}

impl TransformerBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut R) -> Self {
        TransformerBlock {
            wq: dense(store, &format!("{prefix}.q"), d, d, rng),
            wk: dense(store, &format!("{prefix}.k"), d, d, rng),
            wv: dense(store, &format!("{prefix}.v"), d, d, rng),
            wo: dense(store, &format!("{prefix}.o"), d, d, rng),
            ln1: (
                store.add_filled(format!("{prefix}.ln1.g"), vec![d], 1.0),
                store.add_zeros(format!("{prefix}.ln1.b"), vec![d]),
            ),
            ff1: dense(store, &format!("{prefix}.ff1"), d, ffn, rng),
            ff2: dense(store, &format!("{prefix}.ff2"), ffn, d, rng),
            ln2: (
                store.add_filled(format!("{prefix}.ln2.g"), vec![d], 1.0),
                store.add_zeros(format!("{prefix}.ln2.b"), vec![d]),
            ),
        }
    }

    /// `x: [B·n, d]`; `allowed: [B·H·n·n]`. Returns the new states and the
    /// attention probabilities `[B, H, n, n]`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        b: usize,
        n: usize,
        heads: usize,
        allowed: &[bool],
        cls_override: Option<&dyn Fn(&[f64]) -> Result<Vec<f64>>>,
    ) -> Result<(Var, Var)> {
        let d = tape.shape(x)[1];
        let q = apply(tape, x, self.wq)?;
        let k = apply(tape, x, self.wk)?;
        let v = apply(tape, x, self.wv)?;
        let q = tape.reshape(q, vec![b, n, d])?;
        let k = tape.reshape(k, vec![b, n, d])?;
        let v = tape.reshape(v, vec![b, n, d])?;
        let scores = tape.head_scores(q, k, heads)?;
        let mut p = tape.softmax(scores, Some(allowed.to_vec()))?;
        if let Some(f) = cls_override {
            let w = f(tape.data(p))?;
            p = constant_matrix(tape, w, vec![b, heads, n, n])?;
        }
        let attended = tape.head_apply(p, v)?;
        let attended = tape.reshape(attended, vec![b * n, d])?;
        let o = apply(tape, attended, self.wo)?;
        let res = tape.add(x, o)?;
        let x = norm(tape, res, self.ln1)?;
        let h = apply(tape, x, self.ff1)?;
        let h = tape.relu(h)?;
        let f = apply(tape, h, self.ff2)?;
        let res = tape.add(x, f)?;
        Ok((norm(tape, res, self.ln2)?, p))
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    heads: usize,
    dim: usize,
    max_positions: usize,
    restricted: bool,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ClassifierConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let tok = store.add_embedding("embedding", cfg.vocab_size, d, rng);
        let pos = store.add_embedding("position", cfg.max_positions, d, rng);
        let blocks = (0..cfg.layers)
            .map(|l| TransformerBlock::new(store, &format!("layer{l}"), d, cfg.ffn_dim, rng))
            .collect();
        TransformerEncoder {
            tok,
            pos,
            blocks,
            heads: cfg.heads,
            dim: d,
            max_positions: cfg.max_positions,
            restricted: cfg.restricted_mask,
        }
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok
    }

    /// Which key positions each query may read, `[B·H·n·n]` with the CLS at
    /// position 0. Padding rows read only themselves so every row stays a
    /// distribution.
    fn allowed(&self, batch: &Batch, impermissible: &[bool]) -> Vec<bool> {
        let n = batch.width + 1;
        let h = self.heads;
        let mut out = vec![false; batch.size * h * n * n];
        for bi in 0..batch.size {
            let real = batch.lens[bi] + 1;
            let imp = |i: usize| i > 0 && impermissible[bi * batch.width + i - 1];
            let mut block = vec![false; n * n];
            for i in 0..n {
                for j in 0..n {
                    block[i * n + j] = if i >= real {
                        i == j
                    } else if j >= real {
                        false
                    } else if !self.restricted || i == 0 {
                        true
                    } else {
                        j != 0 && imp(i) == imp(j)
                    };
                }
            }
            for hi in 0..h {
                let start = (bi * h + hi) * n * n;
                out[start..start + n * n].copy_from_slice(&block);
            }
        }
        out
    }

    /// Returns the final-layer states `[B, n+1, d]` (CLS first) and the CLS
    /// attention rows `[B, n+1]` for every (layer, head), layer-major.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        impermissible: &[bool],
        how: &AttentionOverride,
    ) -> Result<(Var, Vec<Var>)> {
        let (b, n) = (batch.size, batch.width + 1);
        if n > self.max_positions {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds the {} positions the transformer supports",
                n - 1,
                self.max_positions - 1
            )));
        }
        let mut ids = Vec::with_capacity(b * n);
        for row in batch.ids.chunks(batch.width) {
            ids.push(CLS);
            ids.extend_from_slice(row);
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let tok = tape.param(self.tok);
        let pos = tape.param(self.pos);
        let te = tape.embedding(tok, &ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        let allowed = self.allowed(batch, impermissible);
        let h = self.heads;
        // Valid/impermissible flags for the CLS rows, with CLS at column 0.
        let mut cls_valid = Vec::with_capacity(b * n);
        let mut cls_imp = Vec::with_capacity(b * n);
        for bi in 0..b {
            for j in 0..n {
                cls_valid.push(j <= batch.lens[bi]);
                cls_imp.push(j > 0 && impermissible[bi * batch.width + j - 1]);
            }
        }
        let rewrite = |p: &[f64]| -> Result<Vec<f64>> {
            let mut out = p.to_vec();
            let rows: Vec<f64> = (0..b)
                .flat_map(|bi| (0..h).map(move |hi| (bi, hi)))
                .flat_map(|(bi, hi)| p[((bi * h + hi) * n) * n..((bi * h + hi) * n + 1) * n].to_vec())
                .collect();
            let valid: Vec<bool> = (0..b).flat_map(|bi| (0..h).flat_map(|_| cls_valid[bi * n..(bi + 1) * n].to_vec()).collect::<Vec<_>>()).collect();
            let imp: Vec<bool> = (0..b).flat_map(|bi| (0..h).flat_map(|_| cls_imp[bi * n..(bi + 1) * n].to_vec()).collect::<Vec<_>>()).collect();
            let fixed = match how {
                AttentionOverride::Fixed(given) => {
                    // One row per example, shared by every head and layer.
                    let expanded: Vec<Vec<f64>> = given.iter().flat_map(|r| std::iter::repeat_n(r.clone(), h)).collect();
                    override_weights(&rows, n, &valid, &imp, &AttentionOverride::Fixed(expanded))?
                }
                other => override_weights(&rows, n, &valid, &imp, other)?,
            };
            for (r, chunk) in fixed.chunks(n).enumerate() {
                let (bi, hi) = (r / h, r % h);
                out[((bi * h + hi) * n) * n..((bi * h + hi) * n + 1) * n].copy_from_slice(chunk);
            }
            Ok(out)
        };
        let cls_override: Option<&dyn Fn(&[f64]) -> Result<Vec<f64>>> = match how {
            AttentionOverride::Off => None,
            _ => Some(&rewrite),
        };

        let mut cls_rows = Vec::with_capacity(self.blocks.len() * h);
        for block in &self.blocks {
            let (next, p) = block.forward(tape, x, b, n, h, &allowed, cls_override)?;
            x = next;
            for hi in 0..h {
                let idx = (0..b)
                    .flat_map(|bi| {
                        let start = ((bi * h + hi) * n) * n;
                        start..start + n
                    })
                    .collect();
                cls_rows.push(tape.gather(p, idx, vec![b, n])?);
            }
        }
        let states = tape.reshape(x, vec![b, n, self.dim])?;
        Ok((states, cls_rows))
    }
}
