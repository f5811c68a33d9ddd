mod common;

use proptest::prelude::*;
use vprf::store::synth_corpus;
use vprf::vprf::{
    average_feedback, rocchio_feedback, run_vprf, run_vprf_batch, RefineOptions,
};
use vprf::{CorpusKind, EmbeddingCorpus, FeedbackSet, FlatIndex, VprfParams};

use common::{full_sort_reference, ids, random_corpus, rng, to_f64};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12)
}

fn arb_query_and_feedback() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f32>>)> {
    (1usize..16, 1usize..11).prop_flat_map(|(dim, kappa)| {
        (
            prop::collection::vec(-10.0f64..10.0, dim),
            prop::collection::vec(prop::collection::vec(-10.0f32..10.0, dim), kappa),
        )
    })
}

fn set(fb: &[Vec<f32>]) -> FeedbackSet<'_> {
    FeedbackSet::new(fb.iter().map(|v| ("p", v.as_slice())))
}

proptest! {
    #[test]
    fn average_is_rocchio_with_bridge_weights((q, fb) in arb_query_and_feedback()) {
        let kappa = fb.len() as f64;
        let avg = average_feedback(&q, &set(&fb)).unwrap();
        let roc = rocchio_feedback(&q, &set(&fb), 1.0 / (kappa + 1.0), kappa / (kappa + 1.0)).unwrap();
        for (a, b) in avg.iter().zip(&roc) {
            prop_assert!(close(*a, *b), "{} vs {}", a, b);
        }
    }

    #[test]
    fn rocchio_is_linear_in_query(
        (q, fb) in arb_query_and_feedback(),
        c in 0.01f64..100.0,
        alpha in 0.0f64..2.0,
        beta in 0.0f64..2.0,
    ) {
        prop_assume!(alpha > 0.0 || beta > 0.0);
        let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
        let got = rocchio_feedback(&scaled, &set(&fb), alpha, beta).unwrap();
        let n = fb.len() as f64;
        for (i, g) in got.iter().enumerate() {
            let mean: f64 = fb.iter().map(|v| v[i] as f64).sum::<f64>() / n;
            let expect = alpha * c * q[i] + beta * mean;
            prop_assert!((g - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn feedback_order_does_not_matter((q, fb) in arb_query_and_feedback(), seed in any::<u64>()) {
        let mut shuffled = fb.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng(seed));
        let a = average_feedback(&q, &set(&fb)).unwrap();
        let b = average_feedback(&q, &set(&shuffled)).unwrap();
        let c = rocchio_feedback(&q, &set(&fb), 0.3, 0.8).unwrap();
        let d = rocchio_feedback(&q, &set(&shuffled), 0.3, 0.8).unwrap();
        for i in 0..q.len() {
            prop_assert!(close(a[i], b[i]));
            prop_assert!(close(c[i], d[i]));
        }
    }
}

/// Combine-then-full-sort written out directly against the corpus.
fn straight_line_vprf(passages: &EmbeddingCorpus, query: &[f32], kappa: usize, alpha: f64, beta: f64, k: usize) -> Vec<String> {
    let q = to_f64(query);
    let first = full_sort_reference(passages, &q, kappa);
    let dim = q.len();
    let mut mean = vec![0.0f64; dim];
    for (id, _) in &first {
        let v = &passages.get(id).unwrap().vector;
        for i in 0..dim {
            mean[i] += v[i] as f64;
        }
    }
    let refined: Vec<f64> = (0..dim)
        .map(|i| alpha * q[i] + beta * mean[i] / first.len() as f64)
        .collect();
    full_sort_reference(passages, &refined, k)
        .into_iter()
        .map(|(d, _)| d)
        .collect()
}

#[test]
fn end_to_end_matches_straight_line_oracle() {
    let ds = synth_corpus(8, 50, 64, 0.3, 7).unwrap();
    let index = FlatIndex::build(&ds.passages).unwrap();
    let params = VprfParams::rocchio(3, 1.0, 0.5);
    for q in &ds.queries {
        let got = run_vprf(&index, q, &params, 100).unwrap();
        let expect = straight_line_vprf(&ds.passages, &q.vector, 3, 1.0, 0.5, 100);
        assert_eq!(ids(&got), expect.iter().map(String::as_str).collect::<Vec<_>>());
    }
}

#[test]
fn end_to_end_on_unclustered_data() {
    let mut r = rng(21);
    let passages = random_corpus(&mut r, CorpusKind::Passages, 600, 32, "p");
    let queries = random_corpus(&mut r, CorpusKind::Queries, 25, 32, "q");
    let index = FlatIndex::build(&passages).unwrap();
    for (kappa, alpha, beta) in [(1, 0.5, 0.5), (5, 1.0, 0.9), (10, 0.1, 0.9)] {
        let params = VprfParams::rocchio(kappa, alpha, beta);
        for q in &queries {
            let got = run_vprf(&index, q, &params, 50).unwrap();
            let expect = straight_line_vprf(&passages, &q.vector, kappa, alpha, beta, 50);
            assert_eq!(ids(&got), expect.iter().map(String::as_str).collect::<Vec<_>>());
        }
    }
}

#[test]
fn identity_refinement_over_synthetic_dataset() {
    let ds = synth_corpus(8, 50, 64, 0.3, 3).unwrap();
    let index = FlatIndex::build(&ds.passages).unwrap();
    let baseline = index.batch_search(&ds.queries, 400).unwrap();
    for kappa in [1, 3, 10] {
        let vprf = run_vprf_batch(
            &index,
            &ds.queries,
            &VprfParams::rocchio(kappa, 1.0, 0.0),
            400,
            RefineOptions::default(),
        )
        .unwrap();
        assert_eq!(vprf, baseline);
    }
}

#[test]
fn batch_matches_sequential() {
    let ds = synth_corpus(5, 20, 16, 0.8, 9).unwrap();
    let index = FlatIndex::build(&ds.passages).unwrap();
    let params = VprfParams::average(3);
    let batch = run_vprf_batch(&index, &ds.queries, &params, 30, RefineOptions::default()).unwrap();
    for q in &ds.queries {
        assert_eq!(batch[&q.id], run_vprf(&index, q, &params, 30).unwrap());
    }
}

#[test]
fn scaled_query_with_zero_beta_keeps_ranking() {
    let ds = synth_corpus(4, 30, 16, 1.0, 12).unwrap();
    let index = FlatIndex::build(&ds.passages).unwrap();
    for q in &ds.queries {
        let base = run_vprf(&index, q, &VprfParams::rocchio(3, 1.0, 0.0), 60).unwrap();
        let scaled = run_vprf(&index, q, &VprfParams::rocchio(3, 4.0, 0.0), 60).unwrap();
        assert_eq!(ids(&base), ids(&scaled));
    }
}
