//! Exact nearest-neighbor retrieval over unit-norm demonstration embeddings.
//!
//! The index is a flat list scanned exhaustively on every query. Records are
//! ranked by inner product, ties going to the smaller id, which makes the
//! ranking a strict total order: replacing one record can change the top-k
//! set by at most one swap.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::privacy_core::SamplingConfig;

pub const DEFAULT_DIMENSION: usize = 384;
const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("record {id}: {reason}")]
    Ingestion { id: u64, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot partition {got} results into {shards} shards of {n_shot}")]
    Partition { got: usize, shards: usize, n_shot: usize },
    #[error("line {line}: {reason}")]
    CorpusFormat { line: usize, reason: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// A finite, unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Validates and rescales a raw embedding to unit length.
    pub fn normalized(raw: Vec<f64>) -> Result<Self, String> {
        if raw.is_empty() {
            return Err("embedding is empty".into());
        }
        if let Some(pos) = raw.iter().position(|v| !v.is_finite()) {
            return Err(format!("embedding entry {pos} is not finite"));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err("embedding has zero norm".into());
        }
        let values: Vec<f64> = raw.into_iter().map(|v| v / norm).collect();
        debug_assert!((values.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < NORM_TOLERANCE);
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// One line of a corpus or query file, before validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub id: u64,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub embedding: Vec<f64>,
}

/// A sensitive demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub id: u64,
    pub content: String,
    pub question: Option<String>,
    pub answer: String,
    pub embedding: EmbeddingVector,
}

/// A test query. Its answer, when present, is ground truth for metrics only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u64,
    pub content: String,
    pub question: Option<String>,
    pub answer: Option<String>,
    pub embedding: EmbeddingVector,
}

fn check_embedding(id: u64, raw: Vec<f64>, dimension: usize) -> Result<EmbeddingVector, RetrievalError> {
    if raw.len() != dimension {
        return Err(RetrievalError::Ingestion {
            id,
            reason: format!("embedding dimension {} does not match corpus dimension {dimension}", raw.len()),
        });
    }
    EmbeddingVector::normalized(raw).map_err(|reason| RetrievalError::Ingestion { id, reason })
}

/// Validates a raw demonstration and normalizes its embedding.
pub fn ingest_record(raw: RawRecord, dimension: usize) -> Result<DemoRecord, RetrievalError> {
    let id = raw.id;
    if raw.content.trim().is_empty() {
        return Err(RetrievalError::Ingestion { id, reason: "content is empty".into() });
    }
    let answer = raw
        .answer
        .ok_or_else(|| RetrievalError::Ingestion { id, reason: "missing answer".into() })?;
    let embedding = check_embedding(id, raw.embedding, dimension)?;
    Ok(DemoRecord { id, content: raw.content, question: raw.question, answer, embedding })
}

pub fn ingest_query(raw: RawRecord, dimension: usize) -> Result<QueryRecord, RetrievalError> {
    let id = raw.id;
    let embedding = check_embedding(id, raw.embedding, dimension)?;
    Ok(QueryRecord { id, content: raw.content, question: raw.question, answer: raw.answer, embedding })
}

/// Exhaustive inner-product index. Immutable once built.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    records: Vec<DemoRecord>,
    dimension: usize,
}

impl FlatIndex {
    /// Builds the index, rejecting duplicate ids and dimension mismatches.
    /// Records are stored in increasing id order.
    pub fn build(mut records: Vec<DemoRecord>, dimension: usize) -> Result<Self, RetrievalError> {
        if dimension == 0 {
            return Err(RetrievalError::InvalidParameter("dimension must be >= 1".into()));
        }
        for r in &records {
            if r.embedding.dimension() != dimension {
                return Err(RetrievalError::Ingestion {
                    id: r.id,
                    reason: format!("embedding dimension {} does not match corpus dimension {dimension}", r.embedding.dimension()),
                });
            }
        }
        records.sort_by_key(|r| r.id);
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(RetrievalError::Ingestion { id: w[0].id, reason: "duplicate id".into() });
        }
        Ok(Self { records, dimension })
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

    pub fn records(&self) -> &[DemoRecord] {
        &self.records
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.iter().map(|r| r.id)
    }

    pub fn get(&self, id: u64) -> Option<&DemoRecord> {
        self.records.binary_search_by_key(&id, |r| r.id).ok().map(|i| &self.records[i])
    }
}

/// Ranked `(id, similarity)` pairs, best first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<(u64, f64)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u64> {
        self.ranked.iter().map(|&(id, _)| id).collect()
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

/// Descending score, then ascending id.
fn rank_order(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `min(k, |active|)` active records with the highest inner product.
pub fn top_k(
    index: &FlatIndex,
    query: &EmbeddingVector,
    k: usize,
    active: &BTreeSet<u64>,
) -> Result<RetrievalResult, RetrievalError> {
    if k < 1 {
        return Err(RetrievalError::InvalidParameter("k must be >= 1".into()));
    }
    if query.dimension() != index.dimension {
        return Err(RetrievalError::InvalidParameter(format!(
            "query dimension {} does not match index dimension {}",
            query.dimension(),
            index.dimension
        )));
    }
    let mut scored: Vec<(u64, f64)> = index
        .records
        .iter()
        .filter(|r| active.contains(&r.id))
        .map(|r| (r.id, r.embedding.dot(query)))
        .collect();
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    Ok(RetrievalResult { ranked: scored })
}

/// Disjoint demonstration batches, one per shard.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShardPlan {
    pub batches: Vec<Vec<u64>>,
}

impl ShardPlan {
    /// Deals `ranked` ids round-robin over `shards` batches. Batch `j` gets
    /// positions `j, j + shards, ...`; short input leaves trailing batches
    /// smaller or empty.
    pub fn round_robin(ranked: &[u64], shards: usize) -> Self {
        let mut batches = vec![Vec::new(); shards];
        if shards > 0 {
            for (pos, &id) in ranked.iter().enumerate() {
                batches[pos % shards].push(id);
            }
        }
        Self { batches }
    }

    pub fn all_ids(&self) -> Vec<u64> {
        self.batches.iter().flatten().copied().collect()
    }

    pub fn num_shards(&self) -> usize {
        self.batches.len()
    }
}

/// Splits a full retrieval of exactly `shards * n_shot` records into shards.
pub fn partition_shards(
    result: &RetrievalResult,
    shards: usize,
    n_shot: usize,
) -> Result<ShardPlan, RetrievalError> {
    if shards == 0 || result.len() != shards * n_shot {
        return Err(RetrievalError::Partition { got: result.len(), shards, n_shot });
    }
    Ok(ShardPlan::round_robin(&result.ids(), shards))
}

/// Poisson-sampling baseline: every record joins independently with
/// probability `gamma`, the sample is shuffled, capped at `shards * n_shot`,
/// and dealt round-robin.
pub fn poisson_sample(
    index: &FlatIndex,
    sampling: SamplingConfig,
    shards: usize,
    n_shot: usize,
    seed: u64,
) -> Result<ShardPlan, RetrievalError> {
    SamplingConfig::new(sampling.gamma).map_err(|e| RetrievalError::InvalidParameter(e.to_string()))?;
    if shards == 0 {
        return Err(RetrievalError::InvalidParameter("shard count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled: Vec<u64> =
        index.ids().filter(|_| rng.random::<f64>() < sampling.gamma).collect();
    sampled.shuffle(&mut rng);
    sampled.truncate(shards * n_shot);
    Ok(ShardPlan::round_robin(&sampled, shards))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dimension: usize,
}

fn parse_lines<R: BufRead>(reader: R) -> Result<(usize, Vec<(usize, RawRecord)>), RetrievalError> {
    let mut lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let (header_line, header) = lines
        .next()
        .ok_or(RetrievalError::CorpusFormat { line: 1, reason: "file is empty".into() })?;
    let header: Header = serde_json::from_str(&header?).map_err(|e| RetrievalError::CorpusFormat {
        line: header_line,
        reason: format!("expected header {{\"dimension\": d}}: {e}"),
    })?;
    if header.dimension == 0 {
        return Err(RetrievalError::CorpusFormat { line: header_line, reason: "dimension must be >= 1".into() });
    }
    let mut raws = Vec::new();
    for (line, text) in lines {
        let raw: RawRecord = serde_json::from_str(&text?)
            .map_err(|e| RetrievalError::CorpusFormat { line, reason: e.to_string() })?;
        raws.push((line, raw));
    }
    Ok((header.dimension, raws))
}

/// Reads a JSON-lines corpus: a `{"dimension": d}` header followed by one
/// record per line. Errors carry the 1-based line number.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<FlatIndex, RetrievalError> {
    let (dimension, raws) = parse_lines(reader)?;
    index_lines(dimension, raws)
}

fn index_lines(dimension: usize, raws: Vec<(usize, RawRecord)>) -> Result<FlatIndex, RetrievalError> {
    if raws.is_empty() {
        return Err(RetrievalError::CorpusFormat { line: 1, reason: "corpus has no records".into() });
    }
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(raws.len());
    for (line, raw) in raws {
        if !seen.insert(raw.id) {
            return Err(RetrievalError::CorpusFormat { line, reason: format!("record {}: duplicate id", raw.id) });
        }
        let record = ingest_record(raw, dimension)
            .map_err(|e| RetrievalError::CorpusFormat { line, reason: e.to_string() })?;
        records.push(record);
    }
    FlatIndex::build(records, dimension)
}

pub fn load_corpus(path: &Path) -> Result<FlatIndex, RetrievalError> {
    read_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Size, dimension and raw (pre-normalization) embedding norms of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub records: usize,
    pub dimension: usize,
    pub norm_min: f64,
    pub norm_mean: f64,
    pub norm_max: f64,
}

/// Validates a corpus like [`read_corpus`] and summarizes it.
pub fn summarize_corpus<R: BufRead>(reader: R) -> Result<CorpusSummary, RetrievalError> {
    let (dimension, raws) = parse_lines(reader)?;
    let norms: Vec<f64> =
        raws.iter().map(|(_, r)| r.embedding.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let index = index_lines(dimension, raws)?;
    Ok(CorpusSummary {
        records: index.len(),
        dimension,
        norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
        norm_max: norms.iter().copied().fold(0.0, f64::max),
    })
}

/// Reads a query file in the corpus layout; `answer` is optional.
pub fn read_queries<R: BufRead>(reader: R) -> Result<(usize, Vec<QueryRecord>), RetrievalError> {
    let (dimension, raws) = parse_lines(reader)?;
    let queries = raws
        .into_iter()
        .map(|(line, raw)| {
            ingest_query(raw, dimension).map_err(|e| RetrievalError::CorpusFormat { line, reason: e.to_string() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((dimension, queries))
}

pub fn load_queries(path: &Path) -> Result<(usize, Vec<QueryRecord>), RetrievalError> {
    read_queries(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Writes records in the corpus layout.
pub fn write_corpus<W: std::io::Write>(mut out: W, dimension: usize, records: &[RawRecord]) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::json!({ "dimension": dimension }))?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}
