//! Query/passage embedding collections and their two on-disk formats.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "VPRF" | version: u32 = 1 | dimension: u32 | count: u64
//! count × ( id_len: u16 | id: UTF-8 bytes | dimension × f32 )
//! ```
//!
//! Line-record layout: one record per line, `id<TAB>f f f ...` with the
//! floats space separated. Lines starting with `#` and blank lines are
//! skipped. The dimension is fixed by the first record.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::eval::Qrels;
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"VPRF";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an embedding file: bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: header incomplete")]
    TruncatedHeader,
    #[error("truncated file at record {record}")]
    Truncated { record: usize },
    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),
    #[error("dimension mismatch at record {record} (expected {expected}, found {found})")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate id {id:?} at record {record}")]
    DuplicateId { record: usize, id: String },
    #[error("non-finite component {component} at record {record}")]
    NonFinite { record: usize, component: usize },
    #[error("empty id at record {record}")]
    EmptyId { record: usize },
    #[error("id at record {record} is longer than 65535 bytes")]
    IdTooLong { record: usize },
    #[error("id at record {record} is not valid UTF-8")]
    InvalidUtf8 { record: usize },
    #[error("malformed record {record} (line {line}): {message}")]
    Malformed {
        record: usize,
        line: usize,
        message: String,
    },
    #[error("corpus has no records")]
    Empty,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorpusKind {
    Queries,
    Passages,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Binary,
    LineRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, vector: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            vector,
        }
    }
}

/// A validated, immutable collection of same-dimension embeddings.
///
/// Equality is structural; vectors compare by value, which for finite floats
/// only differs from bit equality on signed zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus {
    kind: CorpusKind,
    dimension: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingCorpus {
    /// Validates every record against the corpus invariants.
    pub fn new(
        kind: CorpusKind,
        dimension: usize,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self, StoreError> {
        if dimension == 0 {
            return Err(StoreError::ZeroDimension);
        }
        if records.is_empty() {
            return Err(StoreError::Empty);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            validate_record(i, rec, dimension)?;
            if !seen.insert(rec.id.as_str()) {
                return Err(StoreError::DuplicateId {
                    record: i,
                    id: rec.id.clone(),
                });
            }
        }
        Ok(Self {
            kind,
            dimension,
            records,
        })
    }

    pub fn kind(&self) -> CorpusKind {
        self.kind
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EmbeddingRecord> {
        self.records.iter()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }
}

impl<'a> IntoIterator for &'a EmbeddingCorpus {
    type Item = &'a EmbeddingRecord;
    type IntoIter = std::slice::Iter<'a, EmbeddingRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

fn validate_record(index: usize, rec: &EmbeddingRecord, dimension: usize) -> Result<(), StoreError> {
    if rec.id.is_empty() {
        return Err(StoreError::EmptyId { record: index });
    }
    if rec.id.len() > u16::MAX as usize {
        return Err(StoreError::IdTooLong { record: index });
    }
    if rec.vector.len() != dimension {
        return Err(StoreError::DimensionMismatch {
            record: index,
            expected: dimension,
            found: rec.vector.len(),
        });
    }
    if let Some(component) = rec.vector.iter().position(|x| !x.is_finite()) {
        return Err(StoreError::NonFinite {
            record: index,
            component,
        });
    }
    Ok(())
}

pub fn load_embeddings(
    path: impl AsRef<Path>,
    format: Format,
    kind: CorpusKind,
) -> Result<EmbeddingCorpus, StoreError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        Format::Binary => {
            let (corpus, used) = decode_binary(&bytes, kind)?;
            if used != bytes.len() {
                return Err(StoreError::TrailingBytes(bytes.len() - used));
            }
            Ok(corpus)
        }
        Format::LineRecord => {
            let text = std::str::from_utf8(&bytes).map_err(|_| StoreError::Malformed {
                record: 0,
                line: 0,
                message: "file is not valid UTF-8".into(),
            })?;
            parse_line_records(text, kind)
        }
    }
}

pub fn save_embeddings(
    corpus: &EmbeddingCorpus,
    path: impl AsRef<Path>,
    format: Format,
) -> Result<(), StoreError> {
    let path = path.as_ref();
    let bytes = match format {
        Format::Binary => encode_binary(corpus),
        Format::LineRecord => format_line_records(corpus).into_bytes(),
    };
    write_atomic(path, &bytes).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_binary(corpus: &EmbeddingCorpus) -> Vec<u8> {
    let payload: usize = corpus
        .records
        .iter()
        .map(|r| 2 + r.id.len() + 4 * corpus.dimension)
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.dimension as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.records.len() as u64).to_le_bytes());
    for rec in &corpus.records {
        out.extend_from_slice(&(rec.id.len() as u16).to_le_bytes());
        out.extend_from_slice(rec.id.as_bytes());
        for x in &rec.vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Decodes one binary corpus from the front of `bytes`, returning it along
/// with the number of bytes consumed. Trailing data is left to the caller.
pub fn decode_binary(bytes: &[u8], kind: CorpusKind) -> Result<(EmbeddingCorpus, usize), StoreError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        return Err(StoreError::TruncatedHeader);
    }
    if &bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dimension = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dimension == 0 {
        return Err(StoreError::ZeroDimension);
    }
    if count == 0 {
        return Err(StoreError::Empty);
    }

    let mut pos = HEADER_LEN;
    // Cap the preallocation: the count comes from untrusted input.
    let mut records = Vec::with_capacity((count as usize).min(1 << 20));
    let mut seen = HashSet::new();
    for record in 0..count as usize {
        let id_len = read_u16(bytes, pos).ok_or(StoreError::Truncated { record })? as usize;
        pos += 2;
        let id_bytes = bytes
            .get(pos..pos + id_len)
            .ok_or(StoreError::Truncated { record })?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| StoreError::InvalidUtf8 { record })?
            .to_owned();
        pos += id_len;
        let payload = bytes
            .get(pos..pos + 4 * dimension)
            .ok_or(StoreError::Truncated { record })?;
        pos += 4 * dimension;
        let vector: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let rec = EmbeddingRecord { id, vector };
        validate_record(record, &rec, dimension)?;
        if !seen.insert(rec.id.clone()) {
            return Err(StoreError::DuplicateId { record, id: rec.id });
        }
        records.push(rec);
    }
    Ok((
        EmbeddingCorpus {
            kind,
            dimension,
            records,
        },
        pos,
    ))
}

fn read_u16(bytes: &[u8], pos: usize) -> Option<u16> {
    bytes
        .get(pos..pos + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
}

pub fn parse_line_records(text: &str, kind: CorpusKind) -> Result<EmbeddingCorpus, StoreError> {
    let mut records: Vec<EmbeddingRecord> = Vec::new();
    let mut dimension = None;
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let record = records.len();
        let malformed = |message: String| StoreError::Malformed {
            record,
            line: line_no,
            message,
        };
        let (id, floats) = line
            .split_once('\t')
            .ok_or_else(|| malformed("missing tab between id and vector".into()))?;
        let vector = floats
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f32>()
                    .map_err(|_| malformed(format!("invalid float {s:?}")))
            })
            .collect::<Result<Vec<f32>, _>>()?;
        let dim = *dimension.get_or_insert(vector.len());
        if dim == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let rec = EmbeddingRecord {
            id: id.to_owned(),
            vector,
        };
        validate_record(record, &rec, dim)?;
        if !seen.insert(rec.id.clone()) {
            return Err(StoreError::DuplicateId { record, id: rec.id });
        }
        records.push(rec);
    }
    let dimension = dimension.ok_or(StoreError::Empty)?;
    Ok(EmbeddingCorpus {
        kind,
        dimension,
        records,
    })
}

/// Renders the line-record format. `f32` display is shortest round-trip,
/// so parsing the output reproduces every component bit for bit.
pub fn format_line_records(corpus: &EmbeddingCorpus) -> String {
    let mut out = String::new();
    for rec in &corpus.records {
        out.push_str(&rec.id);
        out.push('\t');
        for (i, x) in rec.vector.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Synthetic clustered data with known relevance.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub passages: EmbeddingCorpus,
    pub queries: EmbeddingCorpus,
    pub qrels: Qrels,
}

/// Generates `n_clusters` Gaussian clusters. Centroid components are drawn
/// from N(0, 1); each passage is its centroid plus N(0, noise_scale²) noise
/// per component, and each cluster gets one query built the same way.
/// A query's qrels mark exactly its cluster's passages with grade 1.
///
/// Passage ids are `c{cluster}_p{doc}`; query ids are `q{cluster}`.
pub fn synth_corpus(
    n_clusters: usize,
    docs_per_cluster: usize,
    dimension: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<SynthDataset, StoreError> {
    if n_clusters == 0 || docs_per_cluster == 0 || dimension == 0 {
        return Err(StoreError::InvalidArgument(
            "cluster count, docs per cluster and dimension must be positive".into(),
        ));
    }
    if !(noise_scale.is_finite() && noise_scale >= 0.0) {
        return Err(StoreError::InvalidArgument(format!(
            "noise scale must be finite and non-negative, got {noise_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f64, 1.0).unwrap();

    let mut passages = Vec::with_capacity(n_clusters * docs_per_cluster);
    let mut queries = Vec::with_capacity(n_clusters);
    let mut qrels = Qrels::new();
    for c in 0..n_clusters {
        let centroid: Vec<f64> = (0..dimension).map(|_| unit.sample(&mut rng)).collect();
        let perturb = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            centroid
                .iter()
                .map(|&x| (x + noise_scale * unit.sample(rng)) as f32)
                .collect()
        };
        let qid = format!("q{c}");
        for d in 0..docs_per_cluster {
            let pid = format!("c{c}_p{d}");
            passages.push(EmbeddingRecord::new(pid.clone(), perturb(&mut rng)));
            qrels
                .insert(&qid, &pid, 1)
                .expect("synthetic ids are unique");
        }
        queries.push(EmbeddingRecord::new(qid, perturb(&mut rng)));
    }
    Ok(SynthDataset {
        passages: EmbeddingCorpus::new(CorpusKind::Passages, dimension, passages)?,
        queries: EmbeddingCorpus::new(CorpusKind::Queries, dimension, queries)?,
        qrels,
    })
}
