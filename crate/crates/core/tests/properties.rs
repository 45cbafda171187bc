//! Property tests against brute-force references.

use std::collections::BTreeSet;

use bidirep_core::corpus::{reverse_segment, LabeledSentence, TokenSegment};
use bidirep_core::eval::{bio_to_spans, span_prf, span_prf_tags, Span};
use bidirep_core::fusion::{reverse_rows, reversed_index};
use bidirep_core::synth::gen_tagged_corpus;
use bidirep_core::tensor::Matrix;
use bidirep_core::tokenizer::{train_bpe, Vocab};
use proptest::prelude::*;

mod support;

use support::{brute_prf, brute_spans, kshot_violations, TAGS};

fn tag_seq(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(TAGS.to_vec()), 0..max).prop_map(|v| v.into_iter().map(String::from).collect())
}

fn as_set(spans: &[Span]) -> BTreeSet<(String, usize, usize)> {
    spans.iter().map(|s| (s.label.clone(), s.start, s.end)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn span_extraction_matches_reference(tags in tag_seq(14)) {
        let spans = bio_to_spans(&tags);
        prop_assert_eq!(spans.len(), as_set(&spans).len());
        prop_assert_eq!(as_set(&spans), brute_spans(&tags));
    }

    #[test]
    fn span_scores_match_reference(pairs in prop::collection::vec((tag_seq(10), tag_seq(10)), 1..6)) {
        let gold: Vec<Vec<String>> = pairs.iter().map(|(g, _)| g.clone()).collect();
        let pred: Vec<Vec<String>> = pairs.iter().map(|(g, p)| {
            let mut p = p.clone();
            p.resize(g.len(), "O".to_string());
            p
        }).collect();
        let r = span_prf_tags(&gold, &pred).unwrap();
        let (p, rc, f) = brute_prf(&gold, &pred);
        prop_assert_eq!((r.micro.precision, r.micro.recall, r.micro.f1), (p, rc, f));
        // Swapping gold and prediction swaps precision and recall.
        let s = span_prf_tags(&pred, &gold).unwrap();
        prop_assert_eq!((s.micro.precision, s.micro.recall), (r.micro.recall, r.micro.precision));
        prop_assert_eq!(s.micro.f1, r.micro.f1);
    }

    #[test]
    fn reversal_is_an_involution(ids in prop::collection::vec(0u32..300, 1..40)) {
        let seg = TokenSegment::forward(ids.clone());
        let rev = reverse_segment(&seg).unwrap();
        prop_assert_eq!(rev.ids.iter().rev().copied().collect::<Vec<_>>(), ids.clone());
        prop_assert!(reverse_segment(&rev).is_err());
        let n = ids.len();
        for (i, &id) in ids.iter().enumerate() {
            prop_assert_eq!(reversed_index(n, reversed_index(n, i)), i);
            prop_assert_eq!(rev.ids[reversed_index(n, i)], id);
        }
        let m = Matrix::from_vec(n, 1, ids.iter().map(|&x| x as f32).collect());
        prop_assert_eq!(reverse_rows(&reverse_rows(&m)), m);
    }
}

fn tiny_vocab() -> Vocab {
    train_bpe(["the cat sat on the mat", "a cat and a hat", "ünïcödé   spaced\ttext\n"], 300).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tokenizer_round_trips(text in "\\PC{0,40}") {
        let v = tiny_vocab();
        let enc = v.encode(&text);
        prop_assert_eq!(v.decode(&enc.ids).unwrap(), text);
    }

    #[test]
    fn tokenizer_round_trips_bytes(bytes in prop::collection::vec(any::<u8>(), 0..40)) {
        let v = tiny_vocab();
        prop_assert_eq!(v.decode_bytes(&v.encode_bytes(&bytes).ids).unwrap(), bytes);
    }
}

#[test]
fn worked_span_example() {
    let gold = vec![vec![Span::new("PER", 0, 1)]];
    let pred = vec![vec![Span::new("PER", 0, 1), Span::new("ORG", 3, 4)]];
    let r = span_prf(&gold, &pred).unwrap();
    assert!((r.micro.f1 - 2.0 / 3.0).abs() < 1e-12);
}

fn fewshot_pool() -> Vec<LabeledSentence> {
    let v = Vocab::from_merges(Vec::<(Vec<u8>, Vec<u8>)>::new()).unwrap();
    gen_tagged_corpus(1500, 3).into_iter().map(|s| LabeledSentence::new(s.words, s.ner, &v).unwrap()).collect()
}

#[test]
fn kshot_samples_are_sized_single_typed_and_nested() {
    let pool = fewshot_pool();
    for seed in [0, 1, 42] {
        let bad = kshot_violations(&pool, seed);
        assert!(bad.is_empty(), "{}", bad.join("\n"));
    }
}
