//! Relevance judgments, ranked runs, and the two reported metrics.
//!
//! Conventions follow trec_eval: nDCG uses the raw grade as gain with a
//! `log2(rank + 1)` discount, and unjudged documents count as grade 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::index::ScoredHit;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate judgment for ({query}, {doc}) at line {line}")]
    DuplicateJudgment {
        line: usize,
        query: String,
        doc: String,
    },
    #[error("duplicate judgment for ({query}, {doc})")]
    DuplicatePair { query: String, doc: String },
    #[error("duplicate document {doc} for query {query} in run")]
    DuplicateDoc { query: String, doc: String },
    #[error("scores for query {query} are not non-increasing at position {position}")]
    UnsortedScores { query: String, position: usize },
    #[error("non-finite score for query {query}")]
    NonFiniteScore { query: String },
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("no query could be evaluated")]
    NothingToEvaluate,
    #[error("baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),
}

/// Graded judgments keyed by query, then document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: &str, doc: &str, grade: u32) -> Result<(), EvalError> {
        let docs = self.judgments.entry(query.to_owned()).or_default();
        if docs.contains_key(doc) {
            return Err(EvalError::DuplicatePair {
                query: query.to_owned(),
                doc: doc.to_owned(),
            });
        }
        docs.insert(doc.to_owned(), grade);
        Ok(())
    }

    pub fn grade(&self, query: &str, doc: &str) -> u32 {
        self.judgments
            .get(query)
            .and_then(|d| d.get(doc))
            .copied()
            .unwrap_or(0)
    }

    pub fn judgments_for(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn contains_query(&self, query: &str) -> bool {
        self.judgments.contains_key(query)
    }

    /// Number of judged (query, doc) pairs.
    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments.iter().flat_map(|(q, docs)| {
            docs.iter()
                .map(move |(d, g)| (q.as_str(), d.as_str(), *g))
        })
    }

    /// Emits 4-column TREC qrels, sorted by query then doc.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, d, g) in self.iter() {
            writeln!(out, "{q} 0 {d} {g}").unwrap();
        }
        out
    }
}

pub fn parse_qrels(reader: impl BufRead) -> Result<Qrels, EvalError> {
    let mut qrels = Qrels::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| EvalError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [query, _iteration, doc, grade] = fields[..] else {
            return Err(EvalError::Malformed {
                line: line_no,
                message: format!("expected 4 columns, found {}", fields.len()),
            });
        };
        let grade: u32 = grade.parse().map_err(|_| EvalError::Malformed {
            line: line_no,
            message: format!("grade {grade:?} is not a non-negative integer"),
        })?;
        qrels.insert(query, doc, grade).map_err(|_| EvalError::DuplicateJudgment {
            line: line_no,
            query: query.to_owned(),
            doc: doc.to_owned(),
        })?;
    }
    Ok(qrels)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels, EvalError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_qrels(std::io::BufReader::new(file))
}

pub fn save_qrels(qrels: &Qrels, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    write_atomic(path, qrels.to_trec().as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-query ranked lists. Ranks are implicit in list order (1-based).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedRun {
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RankedRun {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or replaces) the ranking for `query`, checking for duplicate
    /// documents and non-increasing scores.
    pub fn insert(&mut self, query: &str, ranking: Vec<(String, f64)>) -> Result<(), EvalError> {
        let mut seen = std::collections::HashSet::with_capacity(ranking.len());
        for (i, (doc, score)) in ranking.iter().enumerate() {
            if !score.is_finite() {
                return Err(EvalError::NonFiniteScore {
                    query: query.to_owned(),
                });
            }
            if !seen.insert(doc.as_str()) {
                return Err(EvalError::DuplicateDoc {
                    query: query.to_owned(),
                    doc: doc.clone(),
                });
            }
            if i > 0 && ranking[i - 1].1 < *score {
                return Err(EvalError::UnsortedScores {
                    query: query.to_owned(),
                    position: i + 1,
                });
            }
        }
        self.rankings.insert(query.to_owned(), ranking);
        Ok(())
    }

    pub fn from_hits<'a, I>(hits: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = (&'a String, &'a Vec<ScoredHit>)>,
    {
        let mut run = Self::new();
        for (qid, list) in hits {
            run.insert(
                qid,
                list.iter().map(|h| (h.doc_id.clone(), h.score)).collect(),
            )?;
        }
        Ok(run)
    }

    pub fn ranking(&self, query: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(query).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.rankings.iter().map(|(q, r)| (q.as_str(), r.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    /// Six-column TREC run text. Scores use shortest round-trip formatting.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (q, ranking) in &self.rankings {
            for (i, (doc, score)) in ranking.iter().enumerate() {
                writeln!(out, "{q} Q0 {doc} {} {score:?} {tag}", i + 1).unwrap();
            }
        }
        out
    }
}

/// Parses a six-column TREC run. Within a query, entries are ordered by
/// descending score, then by the rank column.
pub fn parse_run(reader: impl BufRead) -> Result<RankedRun, EvalError> {
    let mut grouped: BTreeMap<String, Vec<(u64, String, f64)>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| EvalError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [query, _q0, doc, rank, score, _tag] = fields[..] else {
            return Err(EvalError::Malformed {
                line: line_no,
                message: format!("expected 6 columns, found {}", fields.len()),
            });
        };
        let rank: u64 = rank.parse().map_err(|_| EvalError::Malformed {
            line: line_no,
            message: format!("invalid rank {rank:?}"),
        })?;
        let score: f64 = score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| EvalError::Malformed {
                line: line_no,
                message: format!("invalid score {score:?}"),
            })?;
        grouped
            .entry(query.to_owned())
            .or_default()
            .push((rank, doc.to_owned(), score));
    }
    let mut run = RankedRun::new();
    for (query, mut entries) in grouped {
        entries.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        run.insert(&query, entries.into_iter().map(|(_, d, s)| (d, s)).collect())?;
    }
    Ok(run)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<RankedRun, EvalError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_run(std::io::BufReader::new(file))
}

pub fn save_run(run: &RankedRun, tag: &str, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    write_atomic(path, run.to_trec(tag).as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-query values plus their mean for one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Run queries with no judgments; they are left out of the mean.
    pub unjudged_queries: Vec<String>,
}

fn unjudged(run: &RankedRun, qrels: &Qrels) -> Vec<String> {
    run.queries()
        .filter(|q| !qrels.contains_query(q))
        .map(str::to_owned)
        .collect()
}

fn mean(values: &BTreeMap<String, f64>) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::NothingToEvaluate);
    }
    Ok(values.values().sum::<f64>() / values.len() as f64)
}

pub fn ndcg_name(k: usize) -> String {
    format!("ndcg@{k}")
}

pub fn recall_name(k: usize) -> String {
    format!("recall@{k}")
}

/// nDCG@k averaged over every query in `qrels`. Queries missing from the
/// run, or with no positive grades, score 0.
pub fn ndcg_at_k(run: &RankedRun, qrels: &Qrels, k: usize) -> Result<MetricReport, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    let mut per_query = BTreeMap::new();
    for query in qrels.queries() {
        let judged = qrels.judgments_for(query).unwrap();
        let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| g as f64 / discount(i))
            .sum();
        let value = if idcg == 0.0 {
            0.0
        } else {
            let dcg: f64 = run
                .ranking(query)
                .unwrap_or_default()
                .iter()
                .take(k)
                .enumerate()
                .map(|(i, (doc, _))| judged.get(doc).copied().unwrap_or(0) as f64 / discount(i))
                .sum();
            dcg / idcg
        };
        per_query.insert(query.to_owned(), value);
    }
    Ok(MetricReport {
        metric: ndcg_name(k),
        mean: mean(&per_query)?,
        per_query,
        unjudged_queries: unjudged(run, qrels),
    })
}

#[inline]
fn discount(zero_based_rank: usize) -> f64 {
    (zero_based_rank as f64 + 2.0).log2()
}

/// Recall@k with relevance meaning `grade >= min_grade`. Queries with no
/// relevant documents are excluded from both `per_query` and the mean.
pub fn recall_at_k(
    run: &RankedRun,
    qrels: &Qrels,
    k: usize,
    min_grade: u32,
) -> Result<MetricReport, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    let mut per_query = BTreeMap::new();
    for query in qrels.queries() {
        let judged = qrels.judgments_for(query).unwrap();
        let relevant = judged.values().filter(|&&g| g >= min_grade).count();
        if relevant == 0 {
            continue;
        }
        let found = run
            .ranking(query)
            .unwrap_or_default()
            .iter()
            .take(k)
            .filter(|(doc, _)| judged.get(doc).is_some_and(|&g| g >= min_grade))
            .count();
        per_query.insert(query.to_owned(), found as f64 / relevant as f64);
    }
    Ok(MetricReport {
        metric: recall_name(k),
        mean: mean(&per_query)?,
        per_query,
        unjudged_queries: unjudged(run, qrels),
    })
}

/// Relative change of `value` over `baseline`, in percent.
pub fn percent_change(value: f64, baseline: f64) -> Result<f64, EvalError> {
    if !(baseline > 0.0) {
        return Err(EvalError::NonPositiveBaseline(baseline));
    }
    Ok(100.0 * (value - baseline) / baseline)
}
