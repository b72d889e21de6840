mod common;

use attnshort::filter::{
    aggregate_layer, bottom_filter_sequence, filter_dataset, filter_sequence, keep_count, score_sequence, FilterSpec,
    Selection, TokenScores,
};
use attnshort::text::{normalize, tokenize, words, TokenizeMode, CLS, SEP};
use attnshort::{LabeledDataset, LabeledRecord};
use proptest::prelude::*;

/// Sort every index by its score and take the first `k`, with explicit
/// comparisons instead of the library's selection code.
fn oracle(scores: &[f64], p: f64, highest: bool) -> Vec<usize> {
    let m = scores.len();
    let k = ((p * m as f64).round() as usize).max(1).min(m);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a], scores[b]);
        let ord = if highest { sb.partial_cmp(&sa).unwrap() } else { sa.partial_cmp(&sb).unwrap() };
        ord.then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = idx[..k].to_vec();
    kept.sort();
    kept
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0f64..4.0, (0u8..4).prop_map(f64::from)], 3..=64)
}

proptest! {
    #[test]
    fn top_filter_matches_oracle(scores in scores_strategy(), p in 0.01f64..=1.0) {
        let seq = common::content_seq(scores.len());
        let spec = FilterSpec::new(0, p).unwrap();
        let out = filter_sequence(&seq, &TokenScores { scores: scores.clone() }, &spec).unwrap();
        let want = oracle(&scores, p, true);
        prop_assert_eq!(&out.kept, &want);
        prop_assert_eq!(out.seq.len(), want.len() + 2);
        prop_assert_eq!(out.seq.ids[0], CLS);
        prop_assert_eq!(*out.seq.ids.last().unwrap(), SEP);
        let expect_ids: Vec<usize> = want.iter().map(|&i| seq.ids[1 + i]).collect();
        prop_assert_eq!(out.seq.content_ids(), &expect_ids[..]);
    }

    #[test]
    fn bottom_filter_matches_oracle(scores in scores_strategy(), p in 0.01f64..=1.0) {
        let seq = common::content_seq(scores.len());
        let spec = FilterSpec::new(0, p).unwrap();
        let out = bottom_filter_sequence(&seq, &TokenScores { scores: scores.clone() }, &spec).unwrap();
        prop_assert_eq!(out.kept, oracle(&scores, p, false));
    }

    #[test]
    fn selection_is_monotone_in_p(scores in scores_strategy(), p in 0.01f64..1.0, dp in 0.0f64..1.0) {
        let seq = common::content_seq(scores.len());
        let ts = TokenScores { scores };
        let q = (p + dp).min(1.0);
        let small = filter_sequence(&seq, &ts, &FilterSpec::new(0, p).unwrap()).unwrap().kept;
        let large = filter_sequence(&seq, &ts, &FilterSpec::new(0, q).unwrap()).unwrap().kept;
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn distinct_top_and_bottom_partition(m in 3usize..40, p in 0.05f64..0.95, seed in 0u64..1000) {
        // Distinct scores: a seeded permutation of 0..m.
        let mut scores: Vec<f64> = (0..m).map(|i| ((i as u64 * 7919 + seed) % 104_729) as f64 + i as f64 * 1e-6).collect();
        scores.dedup();
        let seq = common::content_seq(m);
        let ts = TokenScores { scores };
        let k_top = keep_count(p, 1, m);
        if k_top < m {
            let q = (m - k_top) as f64 / m as f64;
            let top = filter_sequence(&seq, &ts, &FilterSpec::new(0, p).unwrap()).unwrap().kept;
            let bottom = bottom_filter_sequence(&seq, &ts, &FilterSpec::new(0, q).unwrap()).unwrap().kept;
            prop_assert_eq!(top.len() + bottom.len(), m);
            prop_assert!(top.iter().all(|i| !bottom.contains(i)));
        }
    }

    #[test]
    fn full_fraction_is_idempotent(scores in scores_strategy()) {
        let seq = common::content_seq(scores.len());
        let out = filter_sequence(&seq, &TokenScores { scores }, &FilterSpec::new(0, 1.0).unwrap()).unwrap();
        prop_assert_eq!(out.seq, seq);
    }

    #[test]
    fn aggregate_rows_sum_to_head_count(ids in prop::collection::vec(7usize..23, 1..30), seed in 0u64..100) {
        let (model, _) = common::tiny_model(seed);
        let seq = attnshort::TokenizedSequence::classifier(ids.clone(), vec![None; ids.len()]);
        let out = model.forward(std::slice::from_ref(&seq)).unwrap();
        let at = &out.attention[0];
        for layer in 0..at.num_layers() {
            let agg = aggregate_layer(at, layer).unwrap();
            // Brute-force sum over heads, entry by entry.
            for i in 0..seq.len() {
                let mut row_total = 0.0;
                for j in 0..seq.len() {
                    let expect: f64 = at.weights[layer].iter().map(|h| h[(i, j)] as f64).sum();
                    prop_assert!((agg[(i, j)] - expect).abs() < 1e-12);
                    row_total += agg[(i, j)];
                }
                prop_assert!((row_total - at.num_heads() as f64).abs() < 1e-5);
            }
        }
    }
}

fn dataset(texts: &[&str]) -> LabeledDataset {
    LabeledDataset::new(texts.iter().enumerate().map(|(i, t)| LabeledRecord::new(*t, i % 2)).collect(), 2).unwrap()
}

#[test]
fn dataset_filter_at_full_fraction_is_unchanged() {
    let (model, vocab) = common::tiny_model(0);
    let data = dataset(&["a  b c", "d e\tf g .", "zz unknown h"]);
    let out = filter_dataset(&model, &vocab, &data, &FilterSpec::new(1, 1.0).unwrap(), Selection::Top).unwrap();
    for (orig, got) in data.records.iter().zip(&out.dataset.records) {
        assert_eq!(got.text, normalize(&orig.text));
        assert_eq!(got.label, orig.label);
    }
}

#[test]
fn dataset_filter_keeps_rounded_half() {
    let (model, vocab) = common::tiny_model(1);
    let data = dataset(&["a b c d e", "a b c d", "a", "f g h i j k l"]);
    let out = filter_dataset(&model, &vocab, &data, &FilterSpec::new(0, 0.5).unwrap(), Selection::Top).unwrap();
    for (orig, r) in data.records.iter().zip(&out.records) {
        let m = words(&orig.text).len();
        assert_eq!(r.orig_tokens, m);
        assert_eq!(r.kept_tokens, ((0.5 * m as f64).round() as usize).max(1));
        assert_eq!(words(&r.record.text).len(), r.kept_tokens);
    }
    let rows = out.rows();
    assert!(rows.iter().all(|r| r.layer == 0 && r.keep_fraction == 0.5));
}

#[test]
fn dataset_filter_agrees_with_sequence_filter() {
    let (model, vocab) = common::tiny_model(3);
    let text = "p o n m l k j i";
    let data = dataset(&[text]);
    let spec = FilterSpec::new(0, 0.25).unwrap();
    let out = filter_dataset(&model, &vocab, &data, &spec, Selection::Bottom).unwrap();
    let seq = tokenize(text, &vocab, 70, TokenizeMode::Classifier).unwrap();
    let scores = score_sequence(&model, &seq, 0).unwrap();
    assert!(scores.scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    let direct = bottom_filter_sequence(&seq, &scores, &spec).unwrap();
    assert_eq!(out.records[0].kept, direct.kept);
}

#[test]
fn pair_records_are_filtered_as_joined_text() {
    let (model, vocab) = common::tiny_model(4);
    let data = LabeledDataset::new(vec![LabeledRecord::pair("a b", "c d", 1)], 2).unwrap();
    let out = filter_dataset(&model, &vocab, &data, &FilterSpec::new(0, 1.0).unwrap(), Selection::Top).unwrap();
    assert_eq!(out.dataset.records[0].text, "a b [FSEP] c d");
    assert_eq!(out.records[0].orig_tokens, 5);
}

#[test]
fn layer_out_of_range_is_rejected() {
    let (model, vocab) = common::tiny_model(4);
    let data = dataset(&["a b"]);
    assert!(filter_dataset(&model, &vocab, &data, &FilterSpec::new(2, 0.5).unwrap(), Selection::Top).is_err());
}
