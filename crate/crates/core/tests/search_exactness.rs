mod common;

use proptest::prelude::*;
use vprf::index::l2_norm;
use vprf::{CorpusKind, EmbeddingCorpus, EmbeddingRecord, FlatIndex};

use common::{full_sort_reference, gaussian_vec, ids, random_corpus, rng, to_f64};

#[test]
fn stored_norms_match_recomputation() {
    let mut r = rng(1);
    let corpus = random_corpus(&mut r, CorpusKind::Passages, 1000, 64, "d");
    let index = FlatIndex::build(&corpus).unwrap();
    for (rec, &stored) in corpus.iter().zip(index.norms()) {
        let mut sq = 0.0f64;
        for &x in &rec.vector {
            sq += (x as f64).powi(2);
        }
        let expect = sq.sqrt();
        assert!((stored - expect).abs() <= 1e-6 * expect);
        assert!(stored > 0.0);
    }
}

#[test]
fn top_k_matches_full_sort_reference() {
    let mut r = rng(2);
    let corpus = random_corpus(&mut r, CorpusKind::Passages, 1000, 64, "d");
    let index = FlatIndex::build(&corpus).unwrap();
    for _ in 0..50 {
        let q = to_f64(&gaussian_vec(&mut r, 64));
        let got = index.search(&q, 10).unwrap();
        let expect = full_sort_reference(&corpus, &q, 10);
        assert_eq!(ids(&got), expect.iter().map(|(d, _)| d.as_str()).collect::<Vec<_>>());
        for (i, (h, (_, s))) in got.iter().zip(&expect).enumerate() {
            assert_eq!(h.rank, i + 1);
            assert!((h.score - s).abs() < 1e-9);
        }
        assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

#[test]
fn identical_direction_scores_one() {
    let dim = 16;
    let records = (0..dim)
        .map(|i| {
            let mut v = vec![0.0f32; dim];
            v[i] = 1.0;
            EmbeddingRecord::new(format!("e{i:02}"), v)
        })
        .collect();
    let corpus = EmbeddingCorpus::new(CorpusKind::Passages, dim, records).unwrap();
    let index = FlatIndex::build(&corpus).unwrap();
    for i in 0..dim {
        let hits = index.search_f32(&corpus.records()[i].vector, 3).unwrap();
        assert_eq!(hits[0].doc_id, format!("e{i:02}"));
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        // remaining ties at 0.0 resolve by ascending id
        let rest: Vec<&str> = ids(&hits[1..]);
        let mut sorted = rest.clone();
        sorted.sort();
        assert_eq!(rest, sorted);
    }
}

#[test]
fn batch_equals_single_search() {
    let mut r = rng(3);
    let corpus = random_corpus(&mut r, CorpusKind::Passages, 500, 32, "d");
    let index = FlatIndex::build(&corpus).unwrap();
    let mut queries: Vec<EmbeddingRecord> = (0..30)
        .map(|i| EmbeddingRecord::new(format!("q{i}"), gaussian_vec(&mut r, 32)))
        .collect();
    let dup = queries[4].vector.clone();
    queries.push(EmbeddingRecord::new("q-dup", dup));
    let queries = EmbeddingCorpus::new(CorpusKind::Queries, 32, queries).unwrap();

    let batch = index.batch_search(&queries, 20).unwrap();
    assert_eq!(batch.len(), queries.len());
    for q in &queries {
        assert_eq!(batch[&q.id], index.search_f32(&q.vector, 20).unwrap());
    }
    assert_eq!(batch["q4"], batch["q-dup"]);

    let one = EmbeddingCorpus::new(CorpusKind::Queries, 32, vec![queries.records()[0].clone()]).unwrap();
    let single = index.batch_search(&one, 5).unwrap();
    assert_eq!(single["q0"], index.search_f32(&queries.records()[0].vector, 5).unwrap());
}

#[test]
fn batch_errors_carry_query_id() {
    let mut r = rng(4);
    let corpus = random_corpus(&mut r, CorpusKind::Passages, 10, 4, "d");
    let index = FlatIndex::build(&corpus).unwrap();
    let queries = EmbeddingCorpus::new(
        CorpusKind::Queries,
        4,
        vec![
            EmbeddingRecord::new("fine", vec![1.0, 0.0, 0.0, 0.0]),
            EmbeddingRecord::new("zero", vec![0.0; 4]),
        ],
    )
    .unwrap();
    let err = index.batch_search(&queries, 3).unwrap_err();
    assert!(err.to_string().contains("zero"), "{err}");
}

#[test]
fn scaling_query_keeps_ranking() {
    let mut r = rng(5);
    let corpus = random_corpus(&mut r, CorpusKind::Passages, 800, 24, "d");
    let index = FlatIndex::build(&corpus).unwrap();
    for _ in 0..30 {
        let q = to_f64(&gaussian_vec(&mut r, 24));
        let base = index.search(&q, 25).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e3] {
            let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
            let hits = index.search(&scaled, 25).unwrap();
            assert_eq!(ids(&hits), ids(&base));
            for (a, b) in hits.iter().zip(&base) {
                assert!((a.score - b.score).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn repeated_searches_are_identical() {
    let mut r = rng(6);
    let corpus = random_corpus(&mut r, CorpusKind::Passages, 300, 8, "d");
    let index = FlatIndex::build(&corpus).unwrap();
    let q = to_f64(&gaussian_vec(&mut r, 8));
    let first = index.search(&q, 40).unwrap();
    for _ in 0..5 {
        assert_eq!(index.search(&q, 40).unwrap(), first);
    }
}

#[test]
fn persisted_index_is_deterministic_and_searchable() {
    let mut r = rng(7);
    let corpus = random_corpus(&mut r, CorpusKind::Passages, 200, 12, "d");
    let a = FlatIndex::build(&corpus).unwrap();
    let b = FlatIndex::build(&corpus).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("idx");
    a.save(&path).unwrap();
    let loaded = FlatIndex::load(&path).unwrap();
    let q = to_f64(&gaussian_vec(&mut r, 12));
    assert_eq!(loaded.search(&q, 10).unwrap(), a.search(&q, 10).unwrap());
    assert_eq!(loaded.norms(), a.norms());
}

/// Quantized components make exact score ties common, which exercises the
/// id tie-break against the reference.
fn arb_case() -> impl Strategy<Value = (EmbeddingCorpus, Vec<f64>, usize)> {
    (1usize..6, 1usize..60).prop_flat_map(|(dim, n)| {
        (
            prop::collection::vec(prop::collection::vec(-2i8..=2, dim), n),
            prop::collection::vec(-2i8..=2, dim),
            1usize..80,
        )
            .prop_filter_map("needs non-zero vectors", move |(docs, q, k)| {
                if q.iter().all(|&x| x == 0) {
                    return None;
                }
                let records: Vec<EmbeddingRecord> = docs
                    .into_iter()
                    .enumerate()
                    .filter(|(_, v)| v.iter().any(|&x| x != 0))
                    .map(|(i, v)| EmbeddingRecord::new(format!("{:x}", i * 7919 % 1000), v.iter().map(|&x| x as f32).collect()))
                    .collect();
                if records.is_empty() {
                    return None;
                }
                let corpus = EmbeddingCorpus::new(CorpusKind::Passages, dim, records).ok()?;
                Some((corpus, q.iter().map(|&x| x as f64).collect(), k))
            })
    })
}

proptest! {
    #[test]
    fn exact_with_ties((corpus, q, k) in arb_case()) {
        let index = FlatIndex::build(&corpus).unwrap();
        let got = index.search(&q, k).unwrap();
        let expect = full_sort_reference(&corpus, &q, k);
        prop_assert_eq!(got.len(), k.min(corpus.len()));
        prop_assert_eq!(ids(&got), expect.iter().map(|(d, _)| d.as_str()).collect::<Vec<_>>());
        for rec in &corpus {
            prop_assert!((l2_norm(&rec.vector) - index.norms()[index.ids().iter().position(|i| *i == rec.id).unwrap()]).abs() < 1e-12);
        }
    }
}
