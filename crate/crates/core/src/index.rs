//! Exact cosine top-k search over a flat passage matrix.
//!
//! Vectors are kept as stored (raw `f32`) with their Euclidean norms
//! precomputed, so feedback can combine the original embeddings while
//! ranking stays cosine. Dot products accumulate in `f64`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::store::{self, CorpusKind, EmbeddingCorpus, EmbeddingRecord, StoreError};

const NORMS_MAGIC: &[u8; 4] = b"VPNB";
const NORMS_VERSION: u32 = 1;
const NORM_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index from an empty corpus")]
    Empty,
    #[error("index must be built from a passage corpus")]
    WrongKind,
    #[error("zero-norm vector for doc {0:?}")]
    ZeroNorm(String),
    #[error("query dimension {found} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("query vector has zero norm")]
    ZeroNormQuery,
    #[error("query vector has a non-finite component")]
    NonFiniteQuery,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query {query}")]
    Query {
        query: String,
        #[source]
        source: Box<IndexError>,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt norms block: {0}")]
    CorruptNorms(String),
}

impl IndexError {
    fn for_query(self, query: &str) -> Self {
        IndexError::Query {
            query: query.to_owned(),
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IndexOptions {
    /// Store unit-normalized vectors instead of the raw ones.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHit {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// A hit referring to an index position rather than an owned id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub position: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct FlatIndex {
    dimension: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    norms: Vec<f64>,
    /// `id_order[i]` is the position of `ids[i]` in byte-sorted id order.
    id_order: Vec<u32>,
    normalized: bool,
}

impl FlatIndex {
    pub fn build(passages: &EmbeddingCorpus) -> Result<Self, IndexError> {
        Self::build_with(passages, IndexOptions::default())
    }

    pub fn build_with(passages: &EmbeddingCorpus, options: IndexOptions) -> Result<Self, IndexError> {
        if passages.kind() != CorpusKind::Passages {
            return Err(IndexError::WrongKind);
        }
        if passages.is_empty() {
            return Err(IndexError::Empty);
        }
        let dimension = passages.dimension();
        let mut vectors = Vec::with_capacity(passages.len() * dimension);
        let mut norms = Vec::with_capacity(passages.len());
        let mut ids = Vec::with_capacity(passages.len());
        for rec in passages {
            let norm = l2_norm(&rec.vector);
            if norm == 0.0 {
                return Err(IndexError::ZeroNorm(rec.id.clone()));
            }
            if options.normalize {
                let start = vectors.len();
                vectors.extend(rec.vector.iter().map(|&x| (x as f64 / norm) as f32));
                let stored = l2_norm(&vectors[start..]);
                if stored == 0.0 {
                    return Err(IndexError::ZeroNorm(rec.id.clone()));
                }
                norms.push(stored);
            } else {
                vectors.extend_from_slice(&rec.vector);
                norms.push(norm);
            }
            ids.push(rec.id.clone());
        }
        Ok(Self::assemble(dimension, ids, vectors, norms, options.normalize))
    }

    fn assemble(dimension: usize, ids: Vec<String>, vectors: Vec<f32>, norms: Vec<f64>, normalized: bool) -> Self {
        let mut order: Vec<u32> = (0..ids.len() as u32).collect();
        order.sort_by(|&a, &b| ids[a as usize].as_bytes().cmp(ids[b as usize].as_bytes()));
        let mut id_order = vec![0u32; ids.len()];
        for (rank, &pos) in order.iter().enumerate() {
            id_order[pos as usize] = rank as u32;
        }
        Self {
            dimension,
            ids,
            vectors,
            norms,
            id_order,
            normalized,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn id(&self, position: usize) -> &str {
        &self.ids[position]
    }

    pub fn vector(&self, position: usize) -> &[f32] {
        &self.vectors[position * self.dimension..(position + 1) * self.dimension]
    }

    /// Exact top-k by cosine similarity; ties go to the smaller doc id
    /// (byte order). Returns `min(k, len)` hits.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<ScoredHit>, IndexError> {
        Ok(self.hits(&self.top_k(query, k)?))
    }

    pub fn search_f32(&self, query: &[f32], k: usize) -> Result<Vec<ScoredHit>, IndexError> {
        self.search(&widen(query), k)
    }

    pub fn hits(&self, candidates: &[Candidate]) -> Vec<ScoredHit> {
        candidates
            .iter()
            .enumerate()
            .map(|(i, c)| ScoredHit {
                doc_id: self.ids[c.position].clone(),
                score: c.score,
                rank: i + 1,
            })
            .collect()
    }

    /// Position-level top-k, used where callers need the stored vectors.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<Candidate>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.len() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                found: query.len(),
            });
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(IndexError::NonFiniteQuery);
        }
        let qnorm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qnorm == 0.0 {
            return Err(IndexError::ZeroNormQuery);
        }

        let k = k.min(self.len());
        let mut heap: BinaryHeap<Entry> = BinaryHeap::with_capacity(k + 1);
        for (pos, (row, &dnorm)) in self
            .vectors
            .chunks_exact(self.dimension)
            .zip(&self.norms)
            .enumerate()
        {
            let score = dot(row, query) / (qnorm * dnorm);
            let entry = Entry {
                score,
                id_rank: self.id_order[pos],
                position: pos as u32,
            };
            if heap.len() < k {
                heap.push(entry);
            } else if entry < *heap.peek().unwrap() {
                *heap.peek_mut().unwrap() = entry;
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|e| Candidate {
                position: e.position as usize,
                score: e.score,
            })
            .collect())
    }

    /// Searches every query in parallel. Results are identical to calling
    /// [`FlatIndex::search`] per query.
    pub fn batch_search(
        &self,
        queries: &EmbeddingCorpus,
        k: usize,
    ) -> Result<BTreeMap<String, Vec<ScoredHit>>, IndexError> {
        queries
            .records()
            .par_iter()
            .map(|rec| {
                self.search_f32(&rec.vector, k)
                    .map(|hits| (rec.id.clone(), hits))
                    .map_err(|e| e.for_query(&rec.id))
            })
            .collect()
    }

    /// Persists the vectors in the embedding binary format followed by a
    /// versioned norms block:
    /// `"VPNB" | version: u32 | flags: u32 | count: u64 | count × f64`.
    /// Bit 0 of `flags` records whether vectors were normalized at build.
    pub fn to_bytes(&self) -> Vec<u8> {
        let corpus = self.to_corpus();
        let mut out = store::encode_binary(&corpus);
        out.extend_from_slice(NORMS_MAGIC);
        out.extend_from_slice(&NORMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.normalized as u32).to_le_bytes());
        out.extend_from_slice(&(self.norms.len() as u64).to_le_bytes());
        for n in &self.norms {
            out.extend_from_slice(&n.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let (corpus, used) = store::decode_binary(bytes, CorpusKind::Passages)?;
        let rest = &bytes[used..];
        let corrupt = |m: &str| IndexError::CorruptNorms(m.to_owned());
        if rest.len() < 20 {
            return Err(corrupt("missing or truncated header"));
        }
        if &rest[..4] != NORMS_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(rest[4..8].try_into().unwrap());
        if version != NORMS_VERSION {
            return Err(IndexError::CorruptNorms(format!("unsupported version {version}")));
        }
        let flags = u32::from_le_bytes(rest[8..12].try_into().unwrap());
        let count = u64::from_le_bytes(rest[12..20].try_into().unwrap()) as usize;
        if count != corpus.len() {
            return Err(IndexError::CorruptNorms(format!(
                "{count} norms for {} vectors",
                corpus.len()
            )));
        }
        let body = &rest[20..];
        if body.len() != 8 * count {
            return Err(corrupt("norms payload has the wrong length"));
        }
        let norms: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let dimension = corpus.dimension();
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dimension);
        for (rec, &stored) in corpus.into_records().into_iter().zip(&norms) {
            let actual = l2_norm(&rec.vector);
            if actual == 0.0 {
                return Err(IndexError::ZeroNorm(rec.id));
            }
            if !((stored - actual).abs() <= NORM_REL_TOL * actual) {
                return Err(IndexError::CorruptNorms(format!(
                    "stored norm {stored} for {:?} differs from {actual}",
                    rec.id
                )));
            }
            vectors.extend_from_slice(&rec.vector);
            ids.push(rec.id);
        }
        Ok(Self::assemble(dimension, ids, vectors, norms, flags & 1 == 1))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// The stored vectors as a passage corpus (normalized if the index is).
    pub fn to_corpus(&self) -> EmbeddingCorpus {
        let records = (0..self.len())
            .map(|i| EmbeddingRecord::new(self.ids[i].clone(), self.vector(i).to_vec()))
            .collect();
        EmbeddingCorpus::new(CorpusKind::Passages, self.dimension, records)
            .expect("index contents satisfy corpus invariants")
    }
}

/// Heap entry ordered so that "greater" means "ranks worse": lower score,
/// or equal score with a larger id. The max-heap top is the current k-th.
#[derive(Debug, Clone, Copy)]
struct Entry {
    score: f64,
    id_rank: u32,
    position: u32,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.id_rank.cmp(&other.id_rank))
    }
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// `f32 · f64` dot product with eight independent `f64` accumulators so the
/// loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(&x, &y)| x as f64 * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for lane in 0..8 {
            acc[lane] += ca[lane] as f64 * cb[lane];
        }
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}
