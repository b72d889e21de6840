mod common;

use attnshort::bertscore::{corpus_score, pair_score, score_vectors, write_scores_csv, EncoderEmbedder, TokenEmbedder};
use attnshort::Result;
use proptest::prelude::*;

/// Each word maps to a fixed vector derived from its bytes.
struct HashEmbedder;

impl TokenEmbedder for HashEmbedder {
    fn token_embeddings(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        Ok(text
            .split_whitespace()
            .map(|w| {
                let mut v = [1.0f64; 3];
                for (i, b) in w.bytes().enumerate() {
                    v[i % 3] += f64::from(b % 17);
                }
                v.to_vec()
            })
            .collect())
    }
}

/// Literal definition: cosine on raw vectors, max over the other side,
/// averaged.
fn oracle(reference: &[Vec<f64>], candidate: &[Vec<f64>]) -> (f64, f64) {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let side = |from: &[Vec<f64>], to: &[Vec<f64>]| {
        from.iter().map(|a| to.iter().map(|b| cos(a, b)).fold(f64::MIN, f64::max)).sum::<f64>() / from.len() as f64
    };
    (side(candidate, reference), side(reference, candidate))
}

fn vectors() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..8)
        .prop_filter("nonzero rows", |rows| rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)))
}

proptest! {
    #[test]
    fn matches_literal_definition(x in vectors(), y in vectors()) {
        let s = score_vectors(&x, &y).unwrap();
        let (p, r) = oracle(&x, &y);
        prop_assert!((s.precision - p).abs() < 1e-9);
        prop_assert!((s.recall - r).abs() < 1e-9);
    }

    #[test]
    fn swapping_sides_swaps_precision_and_recall(x in vectors(), y in vectors()) {
        let a = score_vectors(&x, &y).unwrap();
        let b = score_vectors(&y, &x).unwrap();
        prop_assert!((a.precision - b.recall).abs() < 1e-12);
        prop_assert!((a.recall - b.precision).abs() < 1e-12);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
    }

    #[test]
    fn f1_lies_between_its_parts(x in vectors(), y in vectors()) {
        let s = score_vectors(&x, &y).unwrap();
        prop_assert!(s.precision <= 1.0 + 1e-12 && s.recall <= 1.0 + 1e-12);
        if s.precision > 0.0 && s.recall > 0.0 {
            let lo = s.precision.min(s.recall) - 1e-12;
            let hi = s.precision.max(s.recall) + 1e-12;
            prop_assert!(lo <= s.f1 && s.f1 <= hi);
        }
    }

    #[test]
    fn row_order_does_not_matter(x in vectors(), y in vectors(), rot in 0usize..8) {
        let mut xr = x.clone();
        let n = xr.len();
        xr.rotate_left(rot % n);
        let a = score_vectors(&x, &y).unwrap();
        let b = score_vectors(&xr, &y).unwrap();
        prop_assert!((a.precision - b.precision).abs() < 1e-12);
        prop_assert!((a.recall - b.recall).abs() < 1e-12);
    }

    #[test]
    fn candidate_containing_the_reference_has_full_recall(x in vectors(), extra in vectors()) {
        let mut y = extra.clone();
        y.extend(x.iter().cloned());
        let s = score_vectors(&x, &y).unwrap();
        prop_assert!((s.recall - 1.0).abs() < 1e-9);
    }
}

#[test]
fn identical_texts_score_one() {
    let s = pair_score(&HashEmbedder, "the cat sat", "the cat sat").unwrap();
    for v in [s.precision, s.recall, s.f1] {
        assert!((v - 1.0).abs() < 1e-12);
    }
    let (model, vocab) = common::tiny_model(3);
    let e = EncoderEmbedder { model: &model, vocab: &vocab };
    let s = pair_score(&e, "a b c d", "a b c d").unwrap();
    assert!((s.f1 - 1.0).abs() < 1e-6);
}

#[test]
fn corpus_mean_and_csv() {
    let pairs = [("a b", "a c"), ("hello world", "world"), ("x", "yy zz")];
    let score = corpus_score(&HashEmbedder, &pairs).unwrap();
    assert_eq!(score.pairs.len(), 3);
    let mean_f1 = score.pairs.iter().map(|p| p.f1).sum::<f64>() / 3.0;
    assert!((score.mean.f1 - mean_f1).abs() < 1e-12);
    for (p, (r, c)) in score.pairs.iter().zip(&pairs) {
        assert_eq!(*p, pair_score(&HashEmbedder, r, c).unwrap());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    write_scores_csv(&path, &score).unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,precision,recall,f1");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("mean,"));

    let none: [(&str, &str); 0] = [];
    assert!(corpus_score(&HashEmbedder, &none).is_err());
    assert!(pair_score(&HashEmbedder, "", "a").is_err());
}
