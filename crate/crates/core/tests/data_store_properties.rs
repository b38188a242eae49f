//! Round trips of the JSONL record format and the embedding store, plus
//! label-vocabulary and span-mapping invariants.

use std::collections::BTreeSet;

use proptest::prelude::*;
use spanprobe::data::{build_label_vocab, parse_examples, write_examples};
use spanprobe::store::{encode_store, map_span, write_store};
use spanprobe::{
    Arity, EmbeddingStore, LayeredEmbeddings, ProbingExample, ProbingTarget, SpanIndex,
};

fn span_in(words: usize) -> impl Strategy<Value = SpanIndex> {
    (0..words)
        .prop_flat_map(move |s| (Just(s), s + 1..=words))
        .prop_map(|(start, end)| SpanIndex { start, end })
}

fn example(two_span: bool) -> impl Strategy<Value = ProbingExample> {
    (1usize..12, any::<u32>()).prop_flat_map(move |(words, id)| {
        let target = (
            span_in(words),
            span_in(words),
            prop::collection::btree_set("[A-Z]{1,3}(-[a-z]{1,2})?", 1..3),
        )
            .prop_map(move |(s1, s2, labels)| ProbingTarget {
                span1: s1,
                span2: two_span.then_some(s2),
                labels,
            });
        (
            prop::collection::vec("[a-z]{1,6}", words),
            prop::collection::vec(target, 0..4),
            Just(id),
        )
            .prop_map(|(words, targets, id)| {
                let mut info = serde_json::Map::new();
                info.insert("sentence_id".into(), (id as u64).into());
                ProbingExample {
                    words,
                    targets,
                    info,
                }
            })
    })
}

/// A sentence whose words each cover 1..=3 subtokens after one leading special token.
fn embedded() -> impl Strategy<Value = LayeredEmbeddings> {
    (
        prop::collection::vec(1usize..=3, 1..8),
        1usize..=3,
        1usize..=5,
        any::<u64>(),
    )
        .prop_flat_map(|(pieces, layers, dim, id)| {
            let mut alignment = Vec::new();
            let mut at = 1;
            for p in &pieces {
                alignment.push((at, at + p));
                at += p;
            }
            let subtokens = at + 1;
            prop::collection::vec(-1e3f32..1e3, layers * subtokens * dim).prop_map(move |values| {
                LayeredEmbeddings::new(id, layers, subtokens, dim, alignment.clone(), values)
                    .unwrap()
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn records_round_trip(one in prop::collection::vec(example(false), 0..6), two in prop::collection::vec(example(true), 0..6)) {
        for (examples, arity) in [(one, Arity::OneSpan), (two, Arity::TwoSpan)] {
            let mut buf = Vec::new();
            write_examples(&mut buf, &examples).unwrap();
            let back = parse_examples(&buf[..], Some(arity)).unwrap();
            prop_assert_eq!(back, examples);
        }
    }

    #[test]
    fn vocabulary_ignores_example_order(mut examples in prop::collection::vec(example(false), 1..8), seed in any::<u64>()) {
        prop_assume!(examples.iter().any(|e| !e.targets.is_empty()));
        let vocab = build_label_vocab(&examples).unwrap();
        let sorted: Vec<String> = vocab.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        prop_assert_eq!(&vocab, &sorted);
        let k = (seed as usize) % examples.len();
        examples.rotate_left(k);
        examples.reverse();
        prop_assert_eq!(build_label_vocab(&examples).unwrap(), vocab);
    }

    #[test]
    fn store_round_trip(mut sentences in prop::collection::vec(embedded(), 1..6)) {
        // distinct ids, one shared geometry
        let (layers, dim) = (sentences[0].layer_count, sentences[0].dim);
        sentences.retain(|s| s.layer_count == layers && s.dim == dim);
        let mut seen = BTreeSet::new();
        sentences.retain(|s| seen.insert(s.sentence_id));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.spe");
        write_store(&sentences, &path).unwrap();
        let store = EmbeddingStore::open(&path).unwrap();
        prop_assert_eq!(store.sentence_count(), sentences.len());
        prop_assert_eq!((store.layer_count(), store.dim()), (layers, dim));
        for s in &sentences {
            let back = store.get(s.sentence_id).unwrap();
            prop_assert_eq!(&back.alignment, &s.alignment);
            prop_assert_eq!(
                back.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                s.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
        // encoding is independent of input order
        let mut reversed = sentences.clone();
        reversed.reverse();
        prop_assert_eq!(encode_store(&reversed).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn span_mapping_is_monotone(s in embedded(), a in 0usize..8, b in 0usize..8, c in 0usize..8, d in 0usize..8) {
        let words = s.word_count();
        let mk = |x: usize, y: usize| {
            let (lo, hi) = (x.min(y) % words, x.max(y) % words);
            SpanIndex { start: lo.min(hi), end: lo.max(hi) + 1 }
        };
        let (p, q) = (mk(a, b), mk(c, d));
        let (ps, pe) = map_span(&s.alignment, p);
        let (qs, qe) = map_span(&s.alignment, q);
        prop_assert!(ps < pe && pe <= s.subtoken_count);
        if p.start <= q.start { prop_assert!(ps <= qs); }
        if p.end <= q.end { prop_assert!(pe <= qe); }
        if p.start >= q.start && p.end <= q.end { prop_assert!(qs <= ps && pe <= qe); }
    }
}

#[test]
fn missing_store_is_a_store_error() {
    let err = EmbeddingStore::open("/nonexistent/dir/x.spe").unwrap_err();
    assert!(err.to_string().contains("cannot open store"), "{err}");
}

#[test]
fn truncated_store_is_rejected() {
    let s = LayeredEmbeddings::new(4, 2, 3, 2, vec![(0, 1), (1, 3)], vec![0.5; 12]).unwrap();
    let bytes = encode_store(&[s]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for cut in [3, 10, bytes.len() - 1] {
        let path = dir.path().join(format!("t{cut}.spe"));
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(
            EmbeddingStore::open(&path).is_err(),
            "accepted a store cut at {cut}"
        );
    }
}
