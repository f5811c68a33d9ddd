//! Parameter sweeps across datasets, Best-In-Average / Oracle aggregation,
//! per-query timing, and the sweep results CSV.
//!
//! CSV schema (one row per metric):
//! `dataset,method,kappa,alpha,beta,metric,value,per_query_time_s`.
//! Baseline rows use method `baseline` with empty parameter fields; average
//! rows leave `alpha` and `beta` empty.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalError, Qrels, RankedRun};
use crate::index::{widen, Candidate, FlatIndex, IndexError, IndexOptions, ScoredHit};
use crate::store::EmbeddingCorpus;
use crate::vprf::{self, Feedback, FeedbackError, FeedbackSet, RefineOptions, VprfParams};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("empty parameter grid")]
    EmptyGrid,
    #[error("no results for metric {0:?}")]
    NoResults(String),
    #[error("config {config} has no {metric} result for dataset {dataset:?}")]
    Ragged {
        config: String,
        dataset: String,
        metric: String,
    },
    #[error("dataset {dataset:?} has no baseline {metric} result")]
    MissingBaseline { dataset: String, metric: String },
    #[error("query and passage dimensions differ ({queries} vs {passages})")]
    DimensionMismatch { queries: usize, passages: usize },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("csv error")]
    Csv(#[from] csv::Error),
    #[error("csv line {line}: {message}")]
    BadRow { line: u64, message: String },
    #[error("i/o error")]
    Io(#[from] std::io::Error),
}

/// A sweep configuration: first-stage only, or a VPRF setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Config {
    Baseline,
    Vprf(VprfParams),
}

impl Config {
    pub fn label(&self) -> String {
        match self {
            Config::Baseline => "baseline".to_owned(),
            Config::Vprf(p) => p.to_string(),
        }
    }
}

impl std::fmt::Display for Config {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub dataset: String,
    pub config: Config,
    /// Metric name (e.g. `ndcg@10`) to mean value.
    pub metrics: BTreeMap<String, f64>,
    /// Feedback plus second-stage seconds per query (first stage only for
    /// the baseline). Zero when timing was not requested.
    pub per_query_time_s: f64,
}

/// One evaluation dataset: passages, queries and judgments.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub passages: EmbeddingCorpus,
    pub queries: EmbeddingCorpus,
    pub qrels: Qrels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsConfig {
    pub ndcg_k: usize,
    pub recall_k: usize,
    pub min_grade: u32,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ndcg_k: 10,
            recall_k: 100,
            min_grade: 1,
        }
    }
}

impl MetricsConfig {
    pub fn names(&self) -> [String; 2] {
        [eval::ndcg_name(self.ndcg_k), eval::recall_name(self.recall_k)]
    }

    /// Retrieval depth needed to compute every metric.
    pub fn depth(&self) -> usize {
        self.ndcg_k.max(self.recall_k)
    }

    pub fn evaluate(&self, run: &RankedRun, qrels: &Qrels) -> Result<BTreeMap<String, f64>, EvalError> {
        let ndcg = eval::ndcg_at_k(run, qrels, self.ndcg_k)?;
        let recall = eval::recall_at_k(run, qrels, self.recall_k, self.min_grade)?;
        Ok(BTreeMap::from([(ndcg.metric, ndcg.mean), (recall.metric, recall.mean)]))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepOptions {
    pub metrics: MetricsConfig,
    pub index: IndexOptions,
    pub refine: RefineOptions,
    /// Record wall-clock time per query. Timed sweeps run configs
    /// sequentially and are not bit-reproducible in the time column.
    pub measure_time: bool,
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub results: Vec<SweepResult>,
    /// Datasets that failed, with the reason. Other datasets still run.
    pub failures: Vec<(String, SweepError)>,
}

/// Runs the baseline plus every grid config on every dataset. Results come
/// out per dataset as baseline first, then the grid in order.
pub fn run_sweep(datasets: &[Dataset], grid: &[VprfParams], options: &SweepOptions) -> Result<SweepOutcome, SweepError> {
    if grid.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    for p in grid {
        p.validate()?;
    }
    let mut outcome = SweepOutcome::default();
    for ds in datasets {
        match sweep_dataset(ds, grid, options) {
            Ok(mut rs) => outcome.results.append(&mut rs),
            Err(e) => outcome.failures.push((ds.name.clone(), e)),
        }
    }
    Ok(outcome)
}

fn sweep_dataset(ds: &Dataset, grid: &[VprfParams], options: &SweepOptions) -> Result<Vec<SweepResult>, SweepError> {
    if ds.queries.dimension() != ds.passages.dimension() {
        return Err(SweepError::DimensionMismatch {
            queries: ds.queries.dimension(),
            passages: ds.passages.dimension(),
        });
    }
    let index = FlatIndex::build_with(&ds.passages, options.index)?;
    let depth = options.metrics.depth();
    let max_kappa = grid.iter().map(|p| p.kappa).max().unwrap_or(1);
    let queries: Vec<(&str, Vec<f64>)> = ds
        .queries
        .iter()
        .map(|r| (r.id.as_str(), widen(&r.vector)))
        .collect();

    // The exact top-κ is a prefix of the exact top-n, so one first-stage
    // pass deep enough for both the metrics and the largest κ serves all.
    let start = Instant::now();
    let first: Vec<Vec<Candidate>> = queries
        .iter()
        .map(|(id, q)| index.top_k(q, depth.max(max_kappa)).map_err(|e| query_err(id, e)))
        .collect::<Result<_, _>>()?;
    let baseline_time = start.elapsed().as_secs_f64() / queries.len() as f64;

    let mut baseline_run = RankedRun::new();
    for ((id, _), cands) in queries.iter().zip(&first) {
        let hits = index.hits(&cands[..depth.min(cands.len())]);
        baseline_run.insert(id, hits.into_iter().map(|h| (h.doc_id, h.score)).collect())?;
    }
    let mut results = vec![SweepResult {
        dataset: ds.name.clone(),
        config: Config::Baseline,
        metrics: options.metrics.evaluate(&baseline_run, &ds.qrels)?,
        per_query_time_s: if options.measure_time { baseline_time } else { 0.0 },
    }];

    let run_config = |params: &VprfParams| -> Result<SweepResult, SweepError> {
        let start = Instant::now();
        let mut hits = Vec::with_capacity(queries.len());
        for ((id, q), cands) in queries.iter().zip(&first) {
            let h = vprf::second_stage(&index, q, cands, params, depth, options.refine)?;
            hits.push((*id, h));
        }
        let elapsed = start.elapsed().as_secs_f64() / queries.len() as f64;
        let run = run_from(hits)?;
        Ok(SweepResult {
            dataset: ds.name.clone(),
            config: Config::Vprf(*params),
            metrics: options.metrics.evaluate(&run, &ds.qrels)?,
            per_query_time_s: if options.measure_time { elapsed } else { 0.0 },
        })
    };
    let configs: Vec<SweepResult> = if options.measure_time {
        grid.iter().map(run_config).collect::<Result<_, _>>()?
    } else {
        grid.par_iter().map(run_config).collect::<Result<_, _>>()?
    };
    results.extend(configs);
    Ok(results)
}

fn query_err(query: &str, e: IndexError) -> IndexError {
    IndexError::Query {
        query: query.to_owned(),
        source: Box::new(e),
    }
}

fn run_from(hits: Vec<(&str, Vec<ScoredHit>)>) -> Result<RankedRun, EvalError> {
    let mut run = RankedRun::new();
    for (id, list) in hits {
        run.insert(id, list.into_iter().map(|h| (h.doc_id, h.score)).collect())?;
    }
    Ok(run)
}

fn metric_of(r: &SweepResult, metric: &str) -> Option<f64> {
    r.metrics.get(metric).copied()
}

/// Dataset names in order of first appearance.
fn datasets_of(results: &[SweepResult]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for r in results {
        if !out.contains(&r.dataset.as_str()) {
            out.push(&r.dataset);
        }
    }
    out
}

/// Mean of `metric` per config across all datasets, configs in order of
/// first appearance. Fails if any config lacks a dataset.
fn config_means(results: &[SweepResult], metric: &str, include_baseline: bool) -> Result<Vec<(Config, f64)>, SweepError> {
    let datasets = datasets_of(results);
    let mut configs: Vec<(Config, String)> = Vec::new();
    let mut seen = HashSet::new();
    let mut by_key: HashMap<(&str, String), &SweepResult> = HashMap::new();
    for r in results {
        let label = r.config.label();
        if (include_baseline || r.config != Config::Baseline) && seen.insert(label.clone()) {
            configs.push((r.config, label.clone()));
        }
        by_key.entry((r.dataset.as_str(), label)).or_insert(r);
    }
    let mut out = Vec::with_capacity(configs.len());
    for (config, label) in configs {
        let mut sum = 0.0;
        for ds in &datasets {
            let value = by_key
                .get(&(*ds, label.clone()))
                .and_then(|r| metric_of(r, metric))
                .ok_or_else(|| SweepError::Ragged {
                    config: config.label(),
                    dataset: ds.to_string(),
                    metric: metric.to_owned(),
                })?;
            sum += value;
        }
        out.push((config, sum / datasets.len() as f64));
    }
    Ok(out)
}

/// Mean of the baseline metric across datasets.
pub fn baseline_mean(results: &[SweepResult], metric: &str) -> Result<f64, SweepError> {
    let datasets = datasets_of(results);
    if datasets.is_empty() {
        return Err(SweepError::NoResults(metric.to_owned()));
    }
    let mut sum = 0.0;
    for ds in &datasets {
        sum += results
            .iter()
            .find(|r| r.config == Config::Baseline && r.dataset == *ds)
            .and_then(|r| metric_of(r, metric))
            .ok_or_else(|| SweepError::MissingBaseline {
                dataset: ds.to_string(),
                metric: metric.to_owned(),
            })?;
    }
    Ok(sum / datasets.len() as f64)
}

/// The single VPRF config with the best metric averaged over datasets.
/// Ties go to the config seen first. The baseline is not a candidate.
pub fn best_in_average(results: &[SweepResult], metric: &str) -> Result<(VprfParams, f64), SweepError> {
    let mut best: Option<(VprfParams, f64)> = None;
    for (config, mean) in config_means(results, metric, false)? {
        let Config::Vprf(params) = config else { continue };
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((params, mean));
        }
    }
    best.ok_or_else(|| SweepError::NoResults(metric.to_owned()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    /// Winning config per dataset (first seen on ties; baseline included).
    pub winners: Vec<(String, Config, f64)>,
}

/// Per-dataset best over all configs including the baseline, then averaged.
pub fn oracle(results: &[SweepResult], metric: &str) -> Result<OracleResult, SweepError> {
    // Ragged check over the same config set as BIA.
    config_means(results, metric, true)?;
    let datasets = datasets_of(results);
    if datasets.is_empty() {
        return Err(SweepError::NoResults(metric.to_owned()));
    }
    let mut winners = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let mut best: Option<(Config, f64)> = None;
        for r in results.iter().filter(|r| r.dataset == ds) {
            if let Some(v) = metric_of(r, metric) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((r.config, v));
                }
            }
        }
        let (config, value) = best.expect("ragged check guarantees a value");
        winners.push((ds.to_owned(), config, value));
    }
    let value = winners.iter().map(|w| w.2).sum::<f64>() / winners.len() as f64;
    Ok(OracleResult { value, winners })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    dataset: String,
    method: String,
    kappa: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    metric: String,
    value: f64,
    per_query_time_s: f64,
}

pub fn write_sweep_csv<W: Write>(writer: W, results: &[SweepResult]) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in results {
        let (method, kappa, alpha, beta) = match r.config {
            Config::Baseline => ("baseline", None, None, None),
            Config::Vprf(p) => match p.feedback {
                Feedback::Average => ("average", Some(p.kappa), None, None),
                Feedback::Rocchio { alpha, beta } => ("rocchio", Some(p.kappa), Some(alpha), Some(beta)),
            },
        };
        for (metric, &value) in &r.metrics {
            w.serialize(CsvRow {
                dataset: r.dataset.clone(),
                method: method.to_owned(),
                kappa,
                alpha,
                beta,
                metric: metric.clone(),
                value,
                per_query_time_s: r.per_query_time_s,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn sweep_csv_string(results: &[SweepResult]) -> Result<String, SweepError> {
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, results)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Reads rows back into results, merging rows of the same (dataset,
/// config) in order of first appearance.
pub fn read_sweep_csv<R: Read>(reader: R) -> Result<Vec<SweepResult>, SweepError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: Vec<SweepResult> = Vec::new();
    let mut slots: HashMap<(String, String), usize> = HashMap::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        // header is line 1
        let line = i as u64 + 2;
        let bad = |message: &str| SweepError::BadRow {
            line,
            message: message.to_owned(),
        };
        let config = match row.method.as_str() {
            "baseline" => Config::Baseline,
            "average" => Config::Vprf(VprfParams::average(row.kappa.ok_or_else(|| bad("average row needs kappa"))?)),
            "rocchio" => Config::Vprf(VprfParams::rocchio(
                row.kappa.ok_or_else(|| bad("rocchio row needs kappa"))?,
                row.alpha.ok_or_else(|| bad("rocchio row needs alpha"))?,
                row.beta.ok_or_else(|| bad("rocchio row needs beta"))?,
            )),
            other => return Err(bad(&format!("unknown method {other:?}"))),
        };
        match slots.entry((row.dataset.clone(), config.label())) {
            Entry::Occupied(slot) => {
                out[*slot.get()].metrics.insert(row.metric, row.value);
            }
            Entry::Vacant(slot) => {
                slot.insert(out.len());
                out.push(SweepResult {
                    dataset: row.dataset,
                    config,
                    metrics: BTreeMap::from([(row.metric, row.value)]),
                    per_query_time_s: row.per_query_time_s,
                });
            }
        }
    }
    Ok(out)
}

/// What [`time_per_query`] measures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimingMode {
    /// Single-stage search.
    Baseline,
    /// Refinement plus second-stage search; the first stage is excluded.
    Vprf(VprfParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingConfig {
    pub k: usize,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            k: 1000,
            warmup: 2,
            repetitions: 5,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn timed_median<F>(config: &TimingConfig, queries: usize, mut pass: F) -> Result<f64, SweepError>
where
    F: FnMut() -> Result<(), SweepError>,
{
    for _ in 0..config.warmup {
        pass()?;
    }
    let mut samples = Vec::with_capacity(config.repetitions.max(1));
    for _ in 0..config.repetitions.max(1) {
        let start = Instant::now();
        pass()?;
        samples.push(start.elapsed().as_secs_f64() / queries as f64);
    }
    Ok(median(samples))
}

fn first_stage_feedback(index: &FlatIndex, queries: &[Vec<f64>], kappa: usize) -> Result<Vec<Vec<Candidate>>, SweepError> {
    Ok(queries
        .iter()
        .map(|q| index.top_k(q, kappa))
        .collect::<Result<_, _>>()?)
}

/// Median (over repetitions) wall-clock seconds per query, run
/// sequentially on the calling thread.
pub fn time_per_query(
    index: &FlatIndex,
    queries: &EmbeddingCorpus,
    mode: TimingMode,
    config: &TimingConfig,
) -> Result<f64, SweepError> {
    let qs: Vec<Vec<f64>> = queries.iter().map(|r| widen(&r.vector)).collect();
    match mode {
        TimingMode::Baseline => timed_median(config, qs.len(), || {
            for q in &qs {
                std::hint::black_box(index.top_k(q, config.k)?);
            }
            Ok(())
        }),
        TimingMode::Vprf(params) => {
            params.validate()?;
            let first = first_stage_feedback(index, &qs, params.kappa)?;
            timed_median(config, qs.len(), || {
                for (q, cands) in qs.iter().zip(&first) {
                    let set = FeedbackSet::from_candidates(index, cands);
                    let refined = vprf::refine(q, &set, params.feedback, RefineOptions::default())?;
                    std::hint::black_box(index.top_k(&refined, config.k)?);
                }
                Ok(())
            })
        }
    }
}

/// Median seconds per query spent in the refinement arithmetic alone,
/// excluding both searches.
pub fn time_refinement_per_query(
    index: &FlatIndex,
    queries: &EmbeddingCorpus,
    params: &VprfParams,
    config: &TimingConfig,
) -> Result<f64, SweepError> {
    params.validate()?;
    let qs: Vec<Vec<f64>> = queries.iter().map(|r| widen(&r.vector)).collect();
    let first = first_stage_feedback(index, &qs, params.kappa)?;
    timed_median(config, qs.len(), || {
        for (q, cands) in qs.iter().zip(&first) {
            let set = FeedbackSet::from_candidates(index, cands);
            std::hint::black_box(vprf::refine(q, &set, params.feedback, RefineOptions::default())?);
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(dataset: &str, config: Config, metric: &str, value: f64) -> SweepResult {
        SweepResult {
            dataset: dataset.into(),
            config,
            metrics: BTreeMap::from([(metric.to_owned(), value)]),
            per_query_time_s: 0.0,
        }
    }

    #[test]
    fn bia_hand_arithmetic() {
        let a = Config::Vprf(VprfParams::average(1));
        let b = Config::Vprf(VprfParams::average(2));
        let results = vec![
            r("x", Config::Baseline, "m", 0.4),
            r("x", a, "m", 0.5),
            r("x", b, "m", 0.6),
            r("y", Config::Baseline, "m", 0.4),
            r("y", a, "m", 0.7),
            r("y", b, "m", 0.58),
        ];
        let (params, value) = best_in_average(&results, "m").unwrap();
        assert_eq!(params, VprfParams::average(1));
        assert!((value - 0.60).abs() < 1e-12);
        let o = oracle(&results, "m").unwrap();
        assert!((o.value - 0.65).abs() < 1e-12);
        assert_eq!(o.winners[0].1, b);
        assert_eq!(o.winners[1].1, a);
    }

    #[test]
    fn bia_ties_go_to_first_config() {
        let a = Config::Vprf(VprfParams::rocchio(1, 0.1, 0.1));
        let b = Config::Vprf(VprfParams::rocchio(1, 0.1, 0.2));
        let results = vec![r("x", b, "m", 0.5), r("x", a, "m", 0.5)];
        assert_eq!(best_in_average(&results, "m").unwrap().0, VprfParams::rocchio(1, 0.1, 0.2));
    }

    #[test]
    fn bia_can_fall_below_baseline() {
        let a = Config::Vprf(VprfParams::average(3));
        let results = vec![r("x", Config::Baseline, "m", 0.5), r("x", a, "m", 0.4)];
        assert_eq!(best_in_average(&results, "m").unwrap().1, 0.4);
        assert_eq!(oracle(&results, "m").unwrap().value, 0.5);
        assert_eq!(baseline_mean(&results, "m").unwrap(), 0.5);
    }

    #[test]
    fn ragged_results_rejected() {
        let a = Config::Vprf(VprfParams::average(1));
        let b = Config::Vprf(VprfParams::average(2));
        let results = vec![
            r("x", a, "m", 0.5),
            r("x", b, "m", 0.6),
            r("y", a, "m", 0.7),
        ];
        assert!(matches!(best_in_average(&results, "m"), Err(SweepError::Ragged { .. })));
        assert!(matches!(oracle(&results, "m"), Err(SweepError::Ragged { .. })));
        assert!(matches!(best_in_average(&results, "other"), Err(SweepError::Ragged { .. })));
    }

    #[test]
    fn constant_field_oracle() {
        let results: Vec<SweepResult> = ["x", "y", "z"]
            .iter()
            .flat_map(|d| {
                [Config::Baseline, Config::Vprf(VprfParams::average(1))]
                    .map(|c| r(d, c, "m", 0.3))
            })
            .collect();
        assert_eq!(oracle(&results, "m").unwrap().value, 0.3);
        assert_eq!(best_in_average(&results, "m").unwrap().1, 0.3);
    }

    #[test]
    fn csv_round_trip_and_schema() {
        let results = vec![
            SweepResult {
                dataset: "d,1".into(),
                config: Config::Baseline,
                metrics: BTreeMap::from([("ndcg@10".into(), 0.1 + 0.2), ("recall@100".into(), 1.0)]),
                per_query_time_s: 0.0061,
            },
            r("d,1", Config::Vprf(VprfParams::average(3)), "ndcg@10", 0.5),
            r("d,1", Config::Vprf(VprfParams::rocchio(10, 0.7, 0.3)), "ndcg@10", 1e-17),
        ];
        let text = sweep_csv_string(&results).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("dataset,method,kappa,alpha,beta,metric,value,per_query_time_s"));
        assert_eq!(lines.next(), Some("\"d,1\",baseline,,,,ndcg@10,0.30000000000000004,0.0061"));
        assert_eq!(lines.nth(1), Some("\"d,1\",average,3,,,ndcg@10,0.5,0.0"));
        assert_eq!(read_sweep_csv(text.as_bytes()).unwrap(), results);
    }

    #[test]
    fn csv_rejects_bad_method() {
        let text = "dataset,method,kappa,alpha,beta,metric,value,per_query_time_s\nd,magic,1,,,m,0.5,0\n";
        assert!(read_sweep_csv(text.as_bytes()).is_err());
        let text = "dataset,method,kappa,alpha,beta,metric,value,per_query_time_s\nd,rocchio,1,,,m,0.5,0\n";
        assert!(read_sweep_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
