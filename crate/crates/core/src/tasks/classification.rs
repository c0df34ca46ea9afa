use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, ANON, NUM_RESERVED};
use super::{split_of, ClassificationDataset, GeneratorSpec, LabeledExample, Split};
use crate::attention::ImpermissibleMask;
use crate::error::{Error, Result};

pub const FEMALE_PRONOUNS: [&str; 4] = ["she", "her", "hers", "herself"];
pub const MALE_PRONOUNS: [&str; 4] = ["he", "him", "his", "himself"];

/// Share of tokens that are pronouns in a generated biography.
const PRONOUN_RATE: f64 = 0.07;
/// Share of tokens that belong to the review segment.
const REVIEW_SHARE: f64 = 0.45;

fn draw_len(rng: &mut ChaCha8Rng, max_len: usize) -> usize {
    rng.gen_range((max_len / 2).max(2)..=max_len)
}

fn binomial(rng: &mut ChaCha8Rng, n: usize, p: f64) -> usize {
    (0..n).filter(|_| rng.gen_bool(p)).count()
}

/// Biographies of neutral filler tokens with pronouns from exactly one class.
/// Label 0 for female pronouns, 1 for male. Filler tokens are drawn
/// independently of the label, so the pronouns are the only signal.
pub fn gen_gender_bios(spec: &GeneratorSpec, split: Split) -> Result<ClassificationDataset> {
    let reserved = NUM_RESERVED + FEMALE_PRONOUNS.len() + MALE_PRONOUNS.len();
    if spec.vocab_size <= reserved {
        return Err(Error::InvalidInput(format!("vocab_size must exceed {reserved}")));
    }
    if spec.max_len < 2 {
        return Err(Error::InvalidInput("max_len must be at least 2".into()));
    }
    let mut vocab = Vocab::new();
    let female: Vec<usize> = FEMALE_PRONOUNS.iter().map(|p| vocab.intern(p)).collect();
    let male: Vec<usize> = MALE_PRONOUNS.iter().map(|p| vocab.intern(p)).collect();
    for i in 0..spec.vocab_size - reserved {
        vocab.intern(&format!("w{i}"));
    }

    let mut rng = spec.rng(split);
    let mut examples = Vec::with_capacity(spec.n_examples);
    while examples.len() < spec.n_examples {
        // Every bio needs a pronoun, so short bios would overshoot the rate;
        // lengths stay in the top quarter of the range.
        let n = rng.gen_range((3 * spec.max_len).div_ceil(4).max(2)..=spec.max_len);
        let label = rng.gen_range(0..2usize);
        // One pronoun always, the rest binomial so the expected rate is
        // PRONOUN_RATE whenever the sequence is long enough to allow it.
        let q = ((PRONOUN_RATE * n as f64 - 1.0) / (n - 1) as f64).max(0.0);
        let k = 1 + binomial(&mut rng, n - 1, q);
        let mut tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(reserved..spec.vocab_size)).collect();
        let mut positions: Vec<usize> = (0..n).collect();
        positions.shuffle(&mut rng);
        let class = if label == 0 { &female } else { &male };
        let mut mask = ImpermissibleMask::zeros(n);
        for &p in &positions[..k] {
            tokens[p] = *class.choose(&mut rng).expect("non-empty pronoun class");
            mask.0[p] = true;
        }
        if split_of(&tokens) != split {
            continue;
        }
        examples.push(LabeledExample { tokens, label, mask });
    }
    let mut lexicon = female;
    lexicon.extend(male);
    Ok(ClassificationDataset {
        vocab,
        num_classes: 2,
        lexicon,
        examples,
    })
}

/// A review segment followed by a label-independent distractor segment.
///
/// Review tokens are polarity words (`pos*`, `neg*`) mixed with review filler
/// (`r*`); the label is the majority polarity. Distractor tokens (`d*`) are
/// drawn uniformly regardless of label. The whole review segment is
/// impermissible, so the lexicon is every review-side token.
pub fn gen_sentiment_distractor(spec: &GeneratorSpec, split: Split) -> Result<ClassificationDataset> {
    let content = spec.vocab_size.saturating_sub(NUM_RESERVED);
    if content < 8 {
        return Err(Error::InvalidInput(format!(
            "vocab_size must be at least {}",
            NUM_RESERVED + 8
        )));
    }
    if spec.max_len < 4 {
        return Err(Error::InvalidInput("max_len must be at least 4".into()));
    }
    // Quarter each: positive, negative, review filler, distractor.
    let per = content / 4;
    let mut vocab = Vocab::new();
    let pos: Vec<usize> = (0..per).map(|i| vocab.intern(&format!("pos{i}"))).collect();
    let neg: Vec<usize> = (0..per).map(|i| vocab.intern(&format!("neg{i}"))).collect();
    let filler: Vec<usize> = (0..per).map(|i| vocab.intern(&format!("r{i}"))).collect();
    let distract: Vec<usize> = (0..content - 3 * per)
        .map(|i| vocab.intern(&format!("d{i}")))
        .collect();

    let mut rng = spec.rng(split);
    let mut examples = Vec::with_capacity(spec.n_examples);
    while examples.len() < spec.n_examples {
        let n = draw_len(&mut rng, spec.max_len);
        let jitter: i64 = rng.gen_range(-1..=1);
        let review_len = ((REVIEW_SHARE * n as f64).round() as i64 + jitter).clamp(1, n as i64 - 1) as usize;
        let label = rng.gen_range(0..2usize);

        // Odd number of polarity words so the majority is strict.
        let max_polar = if review_len % 2 == 1 { review_len } else { review_len - 1 };
        let polar = 2 * rng.gen_range(0..=(max_polar - 1) / 2) + 1;
        let majority = rng.gen_range(polar / 2 + 1..=polar);
        let (with, against) = if label == 1 { (&pos, &neg) } else { (&neg, &pos) };
        let mut review: Vec<usize> = Vec::with_capacity(review_len);
        for i in 0..review_len {
            let pool = if i < majority {
                with
            } else if i < polar {
                against
            } else {
                &filler
            };
            review.push(*pool.choose(&mut rng).expect("non-empty pool"));
        }
        review.shuffle(&mut rng);

        let mut tokens = review;
        tokens.extend((review_len..n).map(|_| *distract.choose(&mut rng).expect("non-empty pool")));
        let mut mask = ImpermissibleMask::zeros(n);
        mask.0[..review_len].iter_mut().for_each(|b| *b = true);
        if split_of(&tokens) != split {
            continue;
        }
        examples.push(LabeledExample { tokens, label, mask });
    }
    let mut lexicon = pos;
    lexicon.extend(neg);
    lexicon.extend(filler);
    Ok(ClassificationDataset {
        vocab,
        num_classes: 2,
        lexicon,
        examples,
    })
}

/// Replaces every lexicon token with [`ANON`] and clears the mask.
pub fn anonymize(example: &LabeledExample, lexicon: &HashSet<usize>) -> LabeledExample {
    let tokens = example
        .tokens
        .iter()
        .map(|t| if lexicon.contains(t) { ANON } else { *t })
        .collect();
    LabeledExample {
        tokens,
        label: example.label,
        mask: ImpermissibleMask::zeros(example.tokens.len()),
    }
}

pub fn anonymize_dataset(data: &ClassificationDataset) -> ClassificationDataset {
    let lex = data.lexicon_set();
    data.with_examples(data.examples.iter().map(|e| anonymize(e, &lex)).collect())
}
