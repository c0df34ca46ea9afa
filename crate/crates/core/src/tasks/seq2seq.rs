use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, NUM_RESERVED};
use super::{split_of, GeneratorSpec, Seq2SeqDataset, Seq2SeqExample, Split};
use crate::error::{Error, Result};

fn check(spec: &GeneratorSpec, min_len: usize) -> Result<()> {
    if spec.vocab_size <= NUM_RESERVED {
        return Err(Error::InvalidInput(format!(
            "vocab_size must exceed the {NUM_RESERVED} reserved symbols"
        )));
    }
    if spec.max_len < min_len {
        return Err(Error::InvalidInput(format!("max_len must be at least {min_len}")));
    }
    Ok(())
}

fn generate(
    spec: &GeneratorSpec,
    split: Split,
    draw_len: impl Fn(&mut ChaCha8Rng) -> usize,
    map: impl Fn(&[usize]) -> (Vec<usize>, Vec<Vec<usize>>),
) -> Seq2SeqDataset {
    let mut rng = spec.rng(split);
    let mut examples = Vec::with_capacity(spec.n_examples);
    while examples.len() < spec.n_examples {
        let n = draw_len(&mut rng);
        let src: Vec<usize> = (0..n).map(|_| rng.gen_range(NUM_RESERVED..spec.vocab_size)).collect();
        if split_of(&src) != split {
            continue;
        }
        let (tgt, align) = map(&src);
        examples.push(Seq2SeqExample { src, tgt, align });
    }
    Seq2SeqDataset {
        vocab: Vocab::synthetic("t", spec.vocab_size - NUM_RESERVED),
        examples,
    }
}

/// Swaps each adjacent pair: `[a, b, c, d] -> [b, a, d, c]`. Lengths are even;
/// an odd `max_len` is rounded down.
pub fn gen_bigram_flip(spec: &GeneratorSpec, split: Split) -> Result<Seq2SeqDataset> {
    check(spec, 2)?;
    let pairs = spec.max_len / 2;
    Ok(generate(
        spec,
        split,
        |r| 2 * r.gen_range(1..=pairs),
        |src| {
            let align: Vec<Vec<usize>> = (0..src.len()).map(|t| vec![t ^ 1]).collect();
            let tgt = align.iter().map(|a| src[a[0]]).collect();
            (tgt, align)
        },
    ))
}

pub fn gen_copy(spec: &GeneratorSpec, split: Split) -> Result<Seq2SeqDataset> {
    check(spec, 1)?;
    Ok(generate(
        spec,
        split,
        |r| r.gen_range(1..=spec.max_len),
        |src| (src.to_vec(), (0..src.len()).map(|t| vec![t]).collect()),
    ))
}

pub fn gen_reverse(spec: &GeneratorSpec, split: Split) -> Result<Seq2SeqDataset> {
    check(spec, 1)?;
    Ok(generate(
        spec,
        split,
        |r| r.gen_range(1..=spec.max_len),
        |src| {
            let n = src.len();
            let tgt = src.iter().rev().copied().collect();
            (tgt, (0..n).map(|t| vec![n - 1 - t]).collect())
        },
    ))
}
