//! Vector pseudo relevance feedback.
//!
//! Two refinement operators over the top-κ first-stage passages:
//!
//! * **Average**: the componentwise mean of the query and the κ feedback
//!   vectors, κ+1 equally weighted terms.
//! * **Rocchio**: `α·q + β·mean(feedback)`; the mean covers the feedback
//!   vectors only.
//!
//! With these definitions `average(q, F) == rocchio(q, F, 1/(κ+1), κ/(κ+1))`.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::index::{widen, Candidate, FlatIndex, IndexError, ScoredHit};
use crate::store::{EmbeddingCorpus, EmbeddingRecord};

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("feedback set is empty")]
    EmptyFeedback,
    #[error("dimension mismatch: query has {query}, feedback passage {doc:?} has {found}")]
    DimensionMismatch {
        query: usize,
        doc: String,
        found: usize,
    },
    #[error("rocchio weights must be finite and non-negative (alpha={alpha}, beta={beta})")]
    InvalidWeights { alpha: f64, beta: f64 },
    #[error("rocchio weights alpha and beta are both zero")]
    ZeroWeights,
    #[error("feedback depth kappa must be at least 1")]
    ZeroKappa,
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Average,
    Rocchio,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Average => "average",
            Method::Rocchio => "rocchio",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(Method::Average),
            "rocchio" => Ok(Method::Rocchio),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// Which refinement operator to apply, with its weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feedback {
    Average,
    Rocchio { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VprfParams {
    /// Feedback depth κ.
    pub kappa: usize,
    pub feedback: Feedback,
}

impl VprfParams {
    pub fn average(kappa: usize) -> Self {
        Self {
            kappa,
            feedback: Feedback::Average,
        }
    }

    pub fn rocchio(kappa: usize, alpha: f64, beta: f64) -> Self {
        Self {
            kappa,
            feedback: Feedback::Rocchio { alpha, beta },
        }
    }

    pub fn method(&self) -> Method {
        match self.feedback {
            Feedback::Average => Method::Average,
            Feedback::Rocchio { .. } => Method::Rocchio,
        }
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        if self.kappa == 0 {
            return Err(FeedbackError::ZeroKappa);
        }
        if let Feedback::Rocchio { alpha, beta } = self.feedback {
            check_weights(alpha, beta)?;
        }
        Ok(())
    }

    /// Run tag, e.g. `llm-vprf-rocchio-k3-a1-b0.5`.
    pub fn tag(&self) -> String {
        match self.feedback {
            Feedback::Average => format!("llm-vprf-average-k{}", self.kappa),
            Feedback::Rocchio { alpha, beta } => {
                format!("llm-vprf-rocchio-k{}-a{alpha}-b{beta}", self.kappa)
            }
        }
    }
}

impl fmt::Display for VprfParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.feedback {
            Feedback::Average => write!(f, "average(k={})", self.kappa),
            Feedback::Rocchio { alpha, beta } => {
                write!(f, "rocchio(k={}, a={alpha}, b={beta})", self.kappa)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackPassage<'a> {
    pub doc_id: &'a str,
    pub vector: &'a [f32],
}

/// Passages from ranks 1..κ of a first-stage result, in rank order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackSet<'a> {
    passages: Vec<FeedbackPassage<'a>>,
}

impl<'a> FeedbackSet<'a> {
    pub fn new(passages: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Self {
        Self {
            passages: passages
                .into_iter()
                .map(|(doc_id, vector)| FeedbackPassage { doc_id, vector })
                .collect(),
        }
    }

    pub fn from_candidates(index: &'a FlatIndex, candidates: &[Candidate]) -> Self {
        Self {
            passages: candidates
                .iter()
                .map(|c| FeedbackPassage {
                    doc_id: index.id(c.position),
                    vector: index.vector(c.position),
                })
                .collect(),
        }
    }

    pub fn passages(&self) -> &[FeedbackPassage<'a>] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

/// Options for ablations; the defaults combine raw embeddings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RefineOptions {
    /// L2-normalize the query and each feedback vector before combining.
    pub normalize_before_combine: bool,
}

fn check_dims(query: &[f64], feedback: &FeedbackSet<'_>) -> Result<(), FeedbackError> {
    if feedback.is_empty() {
        return Err(FeedbackError::EmptyFeedback);
    }
    for p in feedback.passages() {
        if p.vector.len() != query.len() {
            return Err(FeedbackError::DimensionMismatch {
                query: query.len(),
                doc: p.doc_id.to_owned(),
                found: p.vector.len(),
            });
        }
    }
    Ok(())
}

fn check_weights(alpha: f64, beta: f64) -> Result<(), FeedbackError> {
    if !(alpha.is_finite() && beta.is_finite() && alpha >= 0.0 && beta >= 0.0) {
        return Err(FeedbackError::InvalidWeights { alpha, beta });
    }
    if alpha == 0.0 && beta == 0.0 {
        return Err(FeedbackError::ZeroWeights);
    }
    Ok(())
}

/// Componentwise sum of the feedback vectors, each optionally scaled to
/// unit length first.
fn feedback_sum(dim: usize, feedback: &FeedbackSet<'_>, normalize: bool) -> Vec<f64> {
    let mut sum = vec![0.0f64; dim];
    for p in feedback.passages() {
        let scale = if normalize {
            inverse_norm(p.vector.iter().map(|&x| x as f64))
        } else {
            1.0
        };
        for (s, &x) in sum.iter_mut().zip(p.vector) {
            *s += x as f64 * scale;
        }
    }
    sum
}

fn inverse_norm(v: impl Iterator<Item = f64>) -> f64 {
    let n = v.map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        1.0 / n
    } else {
        1.0
    }
}

/// Mean of the query and all feedback vectors (κ+1 equal weights).
pub fn average_feedback(query: &[f64], feedback: &FeedbackSet<'_>) -> Result<Vec<f64>, FeedbackError> {
    average_feedback_with(query, feedback, RefineOptions::default())
}

pub fn average_feedback_with(
    query: &[f64],
    feedback: &FeedbackSet<'_>,
    options: RefineOptions,
) -> Result<Vec<f64>, FeedbackError> {
    check_dims(query, feedback)?;
    let normalize = options.normalize_before_combine;
    let qscale = if normalize {
        inverse_norm(query.iter().copied())
    } else {
        1.0
    };
    let terms = (feedback.len() + 1) as f64;
    let mut out = feedback_sum(query.len(), feedback, normalize);
    for (o, &q) in out.iter_mut().zip(query) {
        *o = (*o + q * qscale) / terms;
    }
    Ok(out)
}

/// `alpha·query + beta·mean(feedback)`.
pub fn rocchio_feedback(
    query: &[f64],
    feedback: &FeedbackSet<'_>,
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>, FeedbackError> {
    rocchio_feedback_with(query, feedback, alpha, beta, RefineOptions::default())
}

pub fn rocchio_feedback_with(
    query: &[f64],
    feedback: &FeedbackSet<'_>,
    alpha: f64,
    beta: f64,
    options: RefineOptions,
) -> Result<Vec<f64>, FeedbackError> {
    check_weights(alpha, beta)?;
    check_dims(query, feedback)?;
    let normalize = options.normalize_before_combine;
    let qscale = if normalize {
        inverse_norm(query.iter().copied())
    } else {
        1.0
    };
    let n = feedback.len() as f64;
    let mut out = feedback_sum(query.len(), feedback, normalize);
    for (o, &q) in out.iter_mut().zip(query) {
        *o = alpha * (q * qscale) + beta * (*o / n);
    }
    Ok(out)
}

/// Applies the operator selected by `feedback`.
pub fn refine(
    query: &[f64],
    set: &FeedbackSet<'_>,
    feedback: Feedback,
    options: RefineOptions,
) -> Result<Vec<f64>, FeedbackError> {
    match feedback {
        Feedback::Average => average_feedback_with(query, set, options),
        Feedback::Rocchio { alpha, beta } => rocchio_feedback_with(query, set, alpha, beta, options),
    }
}

/// Two-stage retrieval: top-κ first pass, refine, then top-`k_final`.
pub fn run_vprf(
    index: &FlatIndex,
    query: &EmbeddingRecord,
    params: &VprfParams,
    k_final: usize,
) -> Result<Vec<ScoredHit>, FeedbackError> {
    run_vprf_with(index, query, params, k_final, RefineOptions::default())
}

pub fn run_vprf_with(
    index: &FlatIndex,
    query: &EmbeddingRecord,
    params: &VprfParams,
    k_final: usize,
    options: RefineOptions,
) -> Result<Vec<ScoredHit>, FeedbackError> {
    params.validate()?;
    let q = widen(&query.vector);
    let first = index.top_k(&q, params.kappa)?;
    second_stage(index, &q, &first, params, k_final, options)
}

/// Refinement plus second-stage search given first-stage candidates. Only
/// the leading `params.kappa` candidates are used as feedback.
pub fn second_stage(
    index: &FlatIndex,
    query: &[f64],
    first_stage: &[Candidate],
    params: &VprfParams,
    k_final: usize,
    options: RefineOptions,
) -> Result<Vec<ScoredHit>, FeedbackError> {
    let depth = params.kappa.min(first_stage.len());
    let set = FeedbackSet::from_candidates(index, &first_stage[..depth]);
    let refined = refine(query, &set, params.feedback, options)?;
    Ok(index.search(&refined, k_final)?)
}

/// [`run_vprf_with`] over every query, in parallel.
pub fn run_vprf_batch(
    index: &FlatIndex,
    queries: &EmbeddingCorpus,
    params: &VprfParams,
    k_final: usize,
    options: RefineOptions,
) -> Result<BTreeMap<String, Vec<ScoredHit>>, FeedbackError> {
    params.validate()?;
    queries
        .records()
        .par_iter()
        .map(|rec| {
            run_vprf_with(index, rec, params, k_final, options)
                .map(|hits| (rec.id.clone(), hits))
                .map_err(|e| match e {
                    FeedbackError::Index(inner) => FeedbackError::Index(IndexError::Query {
                        query: rec.id.clone(),
                        source: Box::new(inner),
                    }),
                    other => other,
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridVariant {
    /// α and β each over 0.1..=0.9.
    AlphaBetaGrid,
    /// α = 1, β over 0.1..=0.9.
    FixedAlphaOne,
    /// Average operator, one config per κ.
    Average,
}

pub const DEFAULT_KAPPAS: [usize; 5] = [1, 2, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub variant: GridVariant,
    pub kappas: Vec<usize>,
}

impl GridSpec {
    pub fn new(variant: GridVariant) -> Self {
        Self {
            variant,
            kappas: DEFAULT_KAPPAS.to_vec(),
        }
    }

    pub fn with_kappas(variant: GridVariant, kappas: impl Into<Vec<usize>>) -> Self {
        Self {
            variant,
            kappas: kappas.into(),
        }
    }
}

/// 0.1, 0.2, ..., 0.9, each the nearest double to its decimal.
pub fn weight_steps() -> impl Iterator<Item = f64> + Clone {
    (1..=9).map(|i| i as f64 / 10.0)
}

/// Enumerates configs with κ outermost, then α, then β ascending.
pub fn param_grid(spec: &GridSpec) -> Vec<VprfParams> {
    let mut out = Vec::new();
    for &kappa in &spec.kappas {
        match spec.variant {
            GridVariant::Average => out.push(VprfParams::average(kappa)),
            GridVariant::FixedAlphaOne => {
                out.extend(weight_steps().map(|beta| VprfParams::rocchio(kappa, 1.0, beta)))
            }
            GridVariant::AlphaBetaGrid => {
                for alpha in weight_steps() {
                    out.extend(weight_steps().map(|beta| VprfParams::rocchio(kappa, alpha, beta)));
                }
            }
        }
    }
    out
}
