//! Test-only generators and straight-line reference implementations. None
//! of these call into the library's search, feedback or metric code.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vprf::{CorpusKind, EmbeddingCorpus, EmbeddingRecord, Qrels, RankedRun};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|_| StandardNormal.sample(rng))
        .map(|x: f64| x as f32)
        .collect()
}

pub fn random_corpus(rng: &mut ChaCha8Rng, kind: CorpusKind, n: usize, dim: usize, prefix: &str) -> EmbeddingCorpus {
    let records = (0..n)
        .map(|i| EmbeddingRecord::new(format!("{prefix}{i}"), gaussian_vec(rng, dim)))
        .collect();
    EmbeddingCorpus::new(kind, dim, records).unwrap()
}

/// Cosine of every doc, sorted by (score desc, id bytes asc), truncated.
pub fn full_sort_reference(passages: &EmbeddingCorpus, query: &[f64], k: usize) -> Vec<(String, f64)> {
    let qn: f64 = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = passages
        .iter()
        .map(|r| {
            let mut dot = 0.0f64;
            let mut dn = 0.0f64;
            for (i, &x) in r.vector.iter().enumerate() {
                dot += x as f64 * query[i];
                dn += x as f64 * x as f64;
            }
            (r.id.clone(), dot / (qn * dn.sqrt()))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.as_bytes().cmp(b.0.as_bytes())));
    all.truncate(k);
    all
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// nDCG@k: gain = grade, discount log2(rank+1), averaged over qrels queries.
pub fn reference_ndcg(run: &RankedRun, qrels: &Qrels, k: usize) -> f64 {
    let queries: Vec<&str> = qrels.queries().collect();
    let mut total = 0.0;
    for q in &queries {
        let mut grades: Vec<u32> = qrels.iter().filter(|(qq, _, _)| qq == q).map(|(_, _, g)| g).collect();
        grades.sort();
        grades.reverse();
        let mut idcg = 0.0;
        for i in 0..k.min(grades.len()) {
            idcg += grades[i] as f64 / ((i + 2) as f64).ln() * std::f64::consts::LN_2;
        }
        let mut dcg = 0.0;
        if let Some(ranking) = run.ranking(q) {
            for i in 0..k.min(ranking.len()) {
                let g = qrels.grade(q, &ranking[i].0);
                dcg += g as f64 / ((i + 2) as f64).ln() * std::f64::consts::LN_2;
            }
        }
        total += if idcg > 0.0 { dcg / idcg } else { 0.0 };
    }
    total / queries.len() as f64
}

/// Recall@k by set intersection, skipping queries with nothing relevant.
pub fn reference_recall(run: &RankedRun, qrels: &Qrels, k: usize, min_grade: u32) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for q in qrels.queries() {
        let relevant: HashSet<&str> = qrels
            .iter()
            .filter(|(qq, _, g)| *qq == q && *g >= min_grade)
            .map(|(_, d, _)| d)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let retrieved: HashSet<&str> = run
            .ranking(q)
            .map(|r| r.iter().take(k).map(|(d, _)| d.as_str()).collect())
            .unwrap_or_default();
        sum += relevant.intersection(&retrieved).count() as f64 / relevant.len() as f64;
        n += 1;
    }
    sum / n as f64
}

/// A random judged instance: `n_queries` queries over a pool of `pool` docs,
/// grades in 0..=3, run depth up to `depth` with random distinct scores.
pub fn random_instance(rng: &mut ChaCha8Rng, n_queries: usize, pool: usize, depth: usize) -> (RankedRun, Qrels) {
    let mut qrels = Qrels::new();
    let mut run = RankedRun::new();
    for qi in 0..n_queries {
        let q = format!("q{qi}");
        let judged = rng.random_range(1..=pool.min(40));
        let mut docs: Vec<usize> = (0..pool).collect();
        docs.shuffle(rng);
        for &d in &docs[..judged] {
            qrels.insert(&q, &format!("d{d}"), rng.random_range(0..=3)).unwrap();
        }
        docs.shuffle(rng);
        let len = rng.random_range(1..=depth.min(pool));
        let mut scores: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let ranking = docs[..len]
            .iter()
            .zip(scores)
            .map(|(d, s)| (format!("d{d}"), s))
            .collect();
        run.insert(&q, ranking).unwrap();
    }
    (run, qrels)
}

pub fn ids(hits: &[vprf::ScoredHit]) -> Vec<&str> {
    hits.iter().map(|h| h.doc_id.as_str()).collect()
}
