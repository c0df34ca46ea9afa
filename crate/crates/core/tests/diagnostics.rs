use attnlab::attention::ImpermissibleMask;
use attnlab::diagnostics::{
    alignment_hit_rate, corpus_attention_mass, embedding_norm_ratio, evaluate_classifier, token_accuracy,
    zero_and_eval, HeatmapMatrix, MetricsReport,
};
use attnlab::models::{AttentionOverride, AttentionVariant, Classifier, ClassifierConfig, Family};
use attnlab::tasks::{gen_gender_bios, gen_reverse, ClassificationDataset, GeneratorSpec, LabeledExample, Split, TaskKind};
use attnlab::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gender(n: usize) -> ClassificationDataset {
    gen_gender_bios(&GeneratorSpec::new(TaskKind::GenderBios, n, 12, 60, 4), Split::Val).unwrap()
}

fn model(family: Family, variant: AttentionVariant, vocab: usize) -> Classifier {
    let mut c = ClassifierConfig::new(family, vocab, 2, 11);
    c.embed_dim = 8;
    c.hidden_dim = 8;
    c.model_dim = 8;
    c.heads = 2;
    c.ffn_dim = 16;
    c.variant = variant;
    Classifier::new(c).unwrap()
}

fn remask(data: &ClassificationDataset, f: impl Fn(usize, usize) -> bool) -> ClassificationDataset {
    let examples = data
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| LabeledExample {
            mask: ImpermissibleMask((0..e.tokens.len()).map(|j| f(i, j)).collect()),
            ..e.clone()
        })
        .collect();
    data.with_examples(examples)
}

#[test]
fn token_accuracy_closed_forms() {
    assert_eq!(token_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
    assert_eq!(token_accuracy(&[4, 5, 6], &[1, 2, 3]), 0.0);
    assert!((token_accuracy(&[1, 9, 3], &[1, 2, 3]) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(token_accuracy(&[1, 2], &[1, 2, 3, 4]), 0.5);
    assert_eq!(token_accuracy(&[1, 2, 3, 4], &[1, 2]), 0.5);
    assert_eq!(token_accuracy(&[], &[1]), 0.0);
}

#[test]
fn uniform_attention_mass_equals_coverage() {
    let data = gender(40);
    let fixed: Vec<LabeledExample> = data
        .examples
        .iter()
        .map(|e| {
            let mut tokens = e.tokens.clone();
            tokens.resize(10, tokens[0]);
            LabeledExample {
                mask: ImpermissibleMask((0..10).map(|j| j < 3).collect()),
                tokens,
                label: e.label,
            }
        })
        .collect();
    let data = data.with_examples(fixed);
    let m = model(Family::Embedding, AttentionVariant::Uniform, data.vocab.len());
    let mass = corpus_attention_mass(&m, &data).unwrap();
    assert!((mass.mean_over_heads - 0.30).abs() < 1e-12, "{mass:?}");
}

#[test]
fn zero_masks_give_zero_mass() {
    let data = remask(&gender(30), |_, _| false);
    for family in [Family::Embedding, Family::Recurrent, Family::Transformer] {
        let m = model(family, AttentionVariant::LearnedDot, data.vocab.len());
        let mass = corpus_attention_mass(&m, &data).unwrap();
        assert_eq!(mass.mean_over_heads, 0.0);
        assert_eq!(mass.max_over_heads, 0.0);
    }
}

#[test]
fn mass_matches_hand_computation() {
    let mut data = gender(10);
    data.examples.truncate(10);
    for family in [Family::Embedding, Family::Recurrent, Family::Transformer] {
        let m = model(family, AttentionVariant::LearnedDot, data.vocab.len());
        let offset = usize::from(family == Family::Transformer);
        let mut sum_mean = 0.0;
        let mut sum_max = 0.0;
        for e in &data.examples {
            let p = m
                .predict(&[e.tokens.as_slice()], Some(&[e.mask.clone()]), &AttentionOverride::Off, 1)
                .unwrap()
                .remove(0);
            let per_head: Vec<f64> = p
                .attention
                .heads
                .iter()
                .map(|a| e.mask.0.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| a[j + offset]).sum())
                .collect();
            sum_mean += per_head.iter().sum::<f64>() / per_head.len() as f64;
            sum_max += per_head.iter().cloned().fold(0.0, f64::max);
        }
        let got = corpus_attention_mass(&m, &data).unwrap();
        assert!((got.mean_over_heads - sum_mean / 10.0).abs() < 1e-12);
        assert!((got.max_over_heads - sum_max / 10.0).abs() < 1e-12);
    }
}

#[test]
fn zeroing_is_identity_without_impermissible_tokens() {
    let data = remask(&gender(50), |_, _| false);
    for family in [Family::Embedding, Family::Recurrent, Family::Transformer] {
        let m = model(family, AttentionVariant::LearnedDot, data.vocab.len());
        let base = evaluate_classifier(&m, &data, &AttentionOverride::Off).unwrap();
        for renormalize in [true, false] {
            let z = evaluate_classifier(&m, &data, &AttentionOverride::Zero { renormalize }).unwrap();
            assert_eq!(z.accuracy, base.accuracy);
            assert_eq!(zero_and_eval(&m, &data, renormalize).unwrap(), base.accuracy);
        }
    }
}

#[test]
fn zeroing_removes_all_impermissible_mass() {
    let data = gender(30);
    let m = model(Family::Recurrent, AttentionVariant::LearnedDot, data.vocab.len());
    let z = evaluate_classifier(&m, &data, &AttentionOverride::Zero { renormalize: true }).unwrap();
    assert!(z.mass.mean_over_heads.abs() < 1e-15);
}

#[test]
fn diagnostics_do_not_mutate_the_model() {
    let data = gender(20);
    let m = model(Family::Embedding, AttentionVariant::LearnedDot, data.vocab.len());
    let before = m.params.clone();
    zero_and_eval(&m, &data, true).unwrap();
    corpus_attention_mass(&m, &data).unwrap();
    assert_eq!(m.params, before);
}

#[test]
fn norm_ratio_near_one_at_initialization() {
    let data = gender(10);
    for seed in 0..5 {
        let mut c = ClassifierConfig::new(Family::Embedding, data.vocab.len(), 2, seed);
        c.embed_dim = 32;
        let m = Classifier::new(c).unwrap();
        let r = embedding_norm_ratio(&m.params, m.embedding_table(), &data.lexicon, 0).unwrap();
        assert!((r - 1.0).abs() <= 0.2, "seed {seed}: {r}");
        let again = embedding_norm_ratio(&m.params, m.embedding_table(), &data.lexicon, 0).unwrap();
        assert_eq!(r, again);
    }
}

#[test]
fn norm_ratio_needs_a_lexicon() {
    let data = gender(10);
    let m = model(Family::Embedding, AttentionVariant::LearnedDot, data.vocab.len());
    let err = embedding_norm_ratio(&m.params, m.embedding_table(), &[], 0).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn metrics_report_serializes() {
    let data = gender(20);
    let m = model(Family::Transformer, AttentionVariant::LearnedDot, data.vocab.len());
    let e = evaluate_classifier(&m, &data, &AttentionOverride::Off).unwrap();
    let r = MetricsReport::from_classifier(&e);
    assert!((0.0..=1.0).contains(&r.accuracy) && (0.0..=1.0).contains(&r.attention_mass));
    let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

fn random_rows(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| {
            let raw: Vec<f64> = (0..cols).map(|_| r.gen_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        })
        .collect()
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

#[test]
fn heatmap_validates_rows() {
    assert!(HeatmapMatrix::new(vec![vec![0.5, 0.4]], labels(2), None).is_err());
    assert!(HeatmapMatrix::new(vec![vec![0.5, 0.5, 0.0]], labels(2), None).is_err());
    let h = HeatmapMatrix::new(random_rows(3, 5, 1), labels(5), None).unwrap();
    for row in &h.rows {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(h.row_labels, vec!["0", "1", "2"]);
    assert!(h.clone().with_gold(vec![vec![5], vec![], vec![]]).is_err());
}

#[test]
fn svg_has_one_cell_per_weight() {
    let h = HeatmapMatrix::new(random_rows(4, 6, 2), labels(6), None).unwrap();
    let svg = h.to_svg();
    assert_eq!(svg.matches(r#"class="cell""#).count(), 24);
    assert_eq!(svg.matches(r#"class="row-label""#).count(), 4);
    let single = HeatmapMatrix::new(random_rows(1, 3, 3), labels(3), Some(vec!["query".into()])).unwrap();
    assert_eq!(single.to_svg().matches(r#"class="cell""#).count(), 3);
    assert_eq!(single.to_text().lines().count(), 2);
}

#[test]
fn gray_levels_are_monotone() {
    assert_eq!(HeatmapMatrix::gray(0.0), 255);
    assert_eq!(HeatmapMatrix::gray(1.0), 0);
    let levels: Vec<u8> = (0..=100).map(|i| HeatmapMatrix::gray(i as f64 / 100.0)).collect();
    assert!(levels.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn gold_overlay_follows_the_alignment() {
    let data = gen_reverse(&GeneratorSpec::new(TaskKind::Reverse, 5, 6, 20, 0), Split::Test).unwrap();
    let e = &data.examples[0];
    let n = e.src.len();
    // Perfect anti-diagonal attention over the source tokens.
    let rows: Vec<Vec<f64>> = e.align.iter().map(|a| (0..n).map(|j| f64::from(a.contains(&j))).collect()).collect();
    let h = HeatmapMatrix::new(rows.clone(), labels(n), None).unwrap().with_gold(e.align.clone()).unwrap();
    let svg = h.to_svg();
    for (i, a) in e.align.iter().enumerate() {
        for &j in a {
            assert!(svg.contains(&format!(r#"data-row="{i}" data-col="{j}""#)));
        }
    }
    assert_eq!(svg.matches(r#"class="gold""#).count(), n);
    assert_eq!(h.argmax(), e.align.iter().map(|a| a[0]).collect::<Vec<_>>());
    assert_eq!(alignment_hit_rate(&rows, &e.align, 0), 1.0);
    assert!(h.to_text().contains("[@]"));
}

#[test]
fn hit_rate_with_tolerance() {
    let rows = vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 0.0]];
    let gold = vec![vec![0], vec![0], vec![]];
    assert_eq!(alignment_hit_rate(&rows, &gold, 0), 0.0);
    assert_eq!(alignment_hit_rate(&rows, &gold, 1), 0.5);
    assert_eq!(alignment_hit_rate(&rows, &gold, 3), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mass_is_additive_over_disjoint_masks(seed in 0u64..1000, split in 1usize..5) {
        let data = gender(12);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let owner: Vec<Vec<usize>> = data.examples.iter().map(|e| (0..e.tokens.len()).map(|_| r.gen_range(0..split + 1)).collect()).collect();
        let m1 = remask(&data, |i, j| owner[i][j] == 0);
        let m2 = remask(&data, |i, j| owner[i][j] == 1);
        let both = remask(&data, |i, j| owner[i][j] <= 1);
        for family in [Family::Embedding, Family::Recurrent] {
            let m = model(family, AttentionVariant::LearnedDot, data.vocab.len());
            let a = corpus_attention_mass(&m, &m1).unwrap().mean_over_heads;
            let b = corpus_attention_mass(&m, &m2).unwrap().mean_over_heads;
            let c = corpus_attention_mass(&m, &both).unwrap().mean_over_heads;
            prop_assert!((a + b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_rows_stay_distributions(rows in 1usize..6, cols in 1usize..8, seed in 0u64..100) {
        let h = HeatmapMatrix::new(random_rows(rows, cols, seed), labels(cols), None).unwrap();
        prop_assert_eq!(h.to_svg().matches(r#"class="cell""#).count(), rows * cols);
        prop_assert_eq!(h.to_text().lines().count(), rows + 1);
    }
}
