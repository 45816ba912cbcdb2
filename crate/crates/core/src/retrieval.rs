//! Section-level chunking, the exact-scan embedding index, keyword
//! extraction and image collection.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{serialize_corpus, Corpus};
use crate::embedding::{cosine_similarity, tokenize, EmbeddingError, EmbeddingProvider, EmbeddingVector};

pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_NO_ANSWER_FLOOR: f64 = 0.35;
pub const STOPWORDS_VERSION: &str = "en-v1";

const STOPWORDS_SRC: &str = include_str!("../assets/stopwords-en-v1.txt");
const CACHE_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("embedding failed for chunk {record_id}/{section_key}: {source}")]
    ChunkEmbedding {
        record_id: u64,
        section_key: String,
        source: EmbeddingError,
    },
    #[error("chunk {record_id}/{section_key} has dimension {found}, provider declares {expected}")]
    ChunkDimension {
        record_id: u64,
        section_key: String,
        expected: usize,
        found: usize,
    },
    #[error("query is empty")]
    EmptyQuery,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index was built by {index}, query provider is {provider}")]
    ProviderMismatch { index: String, provider: String },
    #[error("query embedding failed: {0}")]
    QueryEmbedding(EmbeddingError),
    #[error("index cache I/O: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("index cache is malformed: {0}")]
    CacheFormat(String),
}

/// One section of one record, with its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub record_id: u64,
    pub record_name: String,
    pub section_key: String,
    pub content: String,
    pub embedding: EmbeddingVector,
}

impl Chunk {
    /// The text that gets embedded: `"<name> — <section>: <content>"`.
    pub fn embedded_text(&self) -> String {
        embedded_text(&self.record_name, &self.section_key, &self.content)
    }
}

pub fn embedded_text(record_name: &str, section_key: &str, content: &str) -> String {
    format!("{record_name} — {section_key}: {content}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub k: usize,
    pub no_answer_floor: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            k: DEFAULT_TOP_K,
            no_answer_floor: DEFAULT_NO_ANSWER_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit<'a> {
    pub chunk: &'a Chunk,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingMode {
    Semantic,
    /// Keyword overlap, used when the embedding provider is unavailable.
    Lexical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResults<'a> {
    pub hits: Vec<SearchHit<'a>>,
    pub low_confidence: bool,
    pub mode: RankingMode,
}

/// Score descending, then record id ascending, then section key ascending.
pub fn hit_order(a: &SearchHit<'_>, b: &SearchHit<'_>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.chunk.record_id.cmp(&b.chunk.record_id))
        .then_with(|| a.chunk.section_key.cmp(&b.chunk.section_key))
}

/// Immutable chunk index; queries scan every chunk.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    chunks: Vec<Chunk>,
    provider_identity: String,
    dimension: usize,
    built_at: DateTime<Utc>,
}

impl RetrievalIndex {
    pub fn build(corpus: &Corpus, provider: &dyn EmbeddingProvider) -> Result<Self, RetrievalError> {
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let dimension = provider.dimension();
        let mut chunks = Vec::new();
        for record in corpus.records() {
            for (key, content) in &record.sections {
                let text = embedded_text(&record.name, key.as_str(), content);
                let embedding =
                    provider
                        .embed(&text)
                        .map_err(|source| RetrievalError::ChunkEmbedding {
                            record_id: record.id,
                            section_key: key.to_string(),
                            source,
                        })?;
                if embedding.dimension() != dimension {
                    return Err(RetrievalError::ChunkDimension {
                        record_id: record.id,
                        section_key: key.to_string(),
                        expected: dimension,
                        found: embedding.dimension(),
                    });
                }
                chunks.push(Chunk {
                    record_id: record.id,
                    record_name: record.name.clone(),
                    section_key: key.to_string(),
                    content: content.clone(),
                    embedding,
                });
            }
        }
        Ok(RetrievalIndex {
            chunks,
            provider_identity: provider.identity().to_string(),
            dimension,
            built_at: Utc::now(),
        })
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn provider_identity(&self) -> &str {
        &self.provider_identity
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn built_at(&self) -> DateTime<Utc> {
        self.built_at
    }

    pub fn search(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
        params: &SearchParams,
    ) -> Result<SearchResults<'_>, RetrievalError> {
        let query = check_query(query, params)?;
        if provider.identity() != self.provider_identity {
            return Err(RetrievalError::ProviderMismatch {
                index: self.provider_identity.clone(),
                provider: provider.identity().to_string(),
            });
        }
        let q = provider.embed(query).map_err(RetrievalError::QueryEmbedding)?;
        let scored = self
            .chunks
            .iter()
            .map(|chunk| {
                let score = cosine_similarity(&q, &chunk.embedding)
                    .map_err(RetrievalError::QueryEmbedding)?;
                Ok(SearchHit { chunk, score })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Ok(rank(scored, params, RankingMode::Semantic))
    }

    /// Ranks chunks by the fraction of query keywords they contain.
    pub fn search_lexical(
        &self,
        query: &str,
        params: &SearchParams,
    ) -> Result<SearchResults<'_>, RetrievalError> {
        let query = check_query(query, params)?;
        let keywords = extract_keywords(query);
        let scored = self
            .chunks
            .iter()
            .map(|chunk| {
                let score = if keywords.is_empty() {
                    0.0
                } else {
                    let tokens: HashSet<String> = tokenize(&chunk.embedded_text()).into_iter().collect();
                    let matched = keywords.iter().filter(|k| tokens.contains(*k)).count();
                    matched as f64 / keywords.len() as f64
                };
                SearchHit { chunk, score }
            })
            .collect();
        Ok(rank(scored, params, RankingMode::Lexical))
    }

    /// Writes provider identity, dimension, corpus hash and per-chunk rows.
    pub fn save_cache(&self, path: &Path, corpus: &Corpus) -> Result<(), RetrievalError> {
        let cache = CacheFile {
            format: CACHE_FORMAT,
            provider_identity: self.provider_identity.clone(),
            dimension: self.dimension,
            corpus_hash: corpus_hash(corpus),
            built_at: self.built_at,
            rows: self
                .chunks
                .iter()
                .map(|c| CacheRow {
                    record_id: c.record_id,
                    section_key: c.section_key.clone(),
                    embedding: c.embedding.clone(),
                })
                .collect(),
        };
        let bytes = serde_json::to_vec(&cache).map_err(|e| RetrievalError::CacheFormat(e.to_string()))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Loads a cached index. Returns `Ok(None)` when the cache is stale: the
    /// corpus content or the provider identity changed.
    pub fn load_cache(
        path: &Path,
        corpus: &Corpus,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Option<Self>, RetrievalError> {
        let bytes = std::fs::read(path)?;
        let cache: CacheFile =
            serde_json::from_slice(&bytes).map_err(|e| RetrievalError::CacheFormat(e.to_string()))?;
        if cache.format != CACHE_FORMAT
            || cache.provider_identity != provider.identity()
            || cache.dimension != provider.dimension()
            || cache.corpus_hash != corpus_hash(corpus)
        {
            return Ok(None);
        }
        let mut rows = cache.rows.into_iter();
        let mut chunks = Vec::new();
        for record in corpus.records() {
            for (key, content) in &record.sections {
                let row = rows
                    .next()
                    .ok_or_else(|| RetrievalError::CacheFormat("too few rows".into()))?;
                if row.record_id != record.id || row.section_key != key.as_str() {
                    return Err(RetrievalError::CacheFormat(format!(
                        "row {}/{} does not match chunk {}/{}",
                        row.record_id, row.section_key, record.id, key
                    )));
                }
                if row.embedding.dimension() != cache.dimension {
                    return Err(RetrievalError::CacheFormat(format!(
                        "row {}/{} has wrong dimension",
                        row.record_id, row.section_key
                    )));
                }
                chunks.push(Chunk {
                    record_id: record.id,
                    record_name: record.name.clone(),
                    section_key: key.to_string(),
                    content: content.clone(),
                    embedding: row.embedding,
                });
            }
        }
        if rows.next().is_some() {
            return Err(RetrievalError::CacheFormat("too many rows".into()));
        }
        Ok(Some(RetrievalIndex {
            chunks,
            provider_identity: cache.provider_identity,
            dimension: cache.dimension,
            built_at: cache.built_at,
        }))
    }
}

fn check_query<'q>(query: &'q str, params: &SearchParams) -> Result<&'q str, RetrievalError> {
    if params.k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let trimmed = query.trim();
    if trimmed.is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    Ok(trimmed)
}

fn rank<'a>(mut scored: Vec<SearchHit<'a>>, params: &SearchParams, mode: RankingMode) -> SearchResults<'a> {
    scored.sort_by(hit_order);
    scored.truncate(params.k);
    let low_confidence = scored
        .first()
        .map_or(true, |top| top.score < params.no_answer_floor);
    SearchResults {
        hits: scored,
        low_confidence,
        mode,
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    format: u32,
    provider_identity: String,
    dimension: usize,
    corpus_hash: String,
    built_at: DateTime<Utc>,
    rows: Vec<CacheRow>,
}

#[derive(Serialize, Deserialize)]
struct CacheRow {
    record_id: u64,
    section_key: String,
    embedding: EmbeddingVector,
}

/// SHA-256 of the canonical corpus document.
pub fn corpus_hash(corpus: &Corpus) -> String {
    hex::encode(Sha256::digest(serialize_corpus(corpus)))
}

fn stopwords() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        STOPWORDS_SRC
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

pub fn is_stopword(token: &str) -> bool {
    stopwords().contains(token)
}

/// Lower-cased, stop-word-filtered tokens, deduplicated in first-occurrence
/// order.
pub fn extract_keywords(query: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize(query)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Images of the records behind `hits`, in hit order, deduplicated and
/// truncated to `max_images`.
pub fn images_for(corpus: &Corpus, hits: &[SearchHit<'_>], max_images: usize) -> Vec<String> {
    let mut seen_records = HashSet::new();
    let mut out: Vec<String> = Vec::new();
    for hit in hits {
        if !seen_records.insert(hit.chunk.record_id) {
            continue;
        }
        let Some(record) = corpus.get(hit.chunk.record_id) else {
            continue;
        };
        for image in &record.images {
            if out.len() == max_images {
                return out;
            }
            if !out.contains(image) {
                out.push(image.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TechnologyRecord;
    use crate::embedding::HashEmbedder;

    fn corpus() -> Corpus {
        let a = TechnologyRecord::new(
            10,
            "Alpha Probe",
            [("Summary", "Alpha probe finds cracks."), ("Advantages", "Cheap and fast.")],
            vec!["https://e.org/a1.png".into(), "https://e.org/shared.png".into()],
            "https://e.org/alpha/",
        )
        .unwrap();
        let b = TechnologyRecord::new(
            20,
            "Beta Scan",
            [("Summary", "Beta scan maps moisture.")],
            vec!["https://e.org/shared.png".into(), "https://e.org/b1.png".into()],
            "https://e.org/beta/",
        )
        .unwrap();
        Corpus::new(vec![a, b], "t").unwrap()
    }

    #[test]
    fn stopword_list_has_120_entries() {
        assert_eq!(stopwords().len(), 120);
    }

    #[test]
    fn keyword_examples() {
        assert_eq!(extract_keywords("What is Hammer Sounding?"), ["hammer", "sounding"]);
        assert!(extract_keywords("the of and").is_empty());
        assert_eq!(
            extract_keywords("Magnetic Particle Testing (MT)"),
            ["magnetic", "particle", "testing", "mt"]
        );
        assert_eq!(extract_keywords("crack Crack CRACK depth"), ["crack", "depth"]);
    }

    #[test]
    fn one_chunk_per_section() {
        let provider = HashEmbedder::default();
        let index = RetrievalIndex::build(&corpus(), &provider).unwrap();
        assert_eq!(index.chunks().len(), 3);
        assert_eq!(index.chunks()[0].embedded_text(), "Alpha Probe — summary: Alpha probe finds cracks.");
        assert!(index.chunks().iter().all(|c| c.embedding.dimension() == 256));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = RetrievalIndex::build(&Corpus::empty("t"), &HashEmbedder::default()).unwrap_err();
        assert!(matches!(err, RetrievalError::EmptyCorpus));
    }

    struct Failing;
    impl EmbeddingProvider for Failing {
        fn identity(&self) -> &str {
            "failing"
        }
        fn dimension(&self) -> usize {
            8
        }
        fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
            if text.contains("Beta") {
                Err(EmbeddingError::Provider("down".into()))
            } else {
                crate::embedding::hash_embed(text, 8)
            }
        }
    }

    #[test]
    fn build_failure_names_chunk() {
        let err = RetrievalIndex::build(&corpus(), &Failing).unwrap_err();
        assert!(err.to_string().contains("20/summary"), "{err}");
    }

    #[test]
    fn self_retrieval_scores_one() {
        let provider = HashEmbedder::default();
        let index = RetrievalIndex::build(&corpus(), &provider).unwrap();
        let target = &index.chunks()[2];
        let res = index
            .search(&provider, &target.embedded_text(), &SearchParams::default())
            .unwrap();
        assert_eq!(res.hits[0].chunk, target);
        assert!((res.hits[0].score - 1.0).abs() < 1e-9);
        assert!(!res.low_confidence);
    }

    #[test]
    fn search_rejects_bad_input() {
        let provider = HashEmbedder::default();
        let index = RetrievalIndex::build(&corpus(), &provider).unwrap();
        assert!(matches!(
            index.search(&provider, "   ", &SearchParams::default()),
            Err(RetrievalError::EmptyQuery)
        ));
        let zero = SearchParams { k: 0, ..Default::default() };
        assert!(matches!(index.search(&provider, "x", &zero), Err(RetrievalError::ZeroK)));
        let other = HashEmbedder::new(64).unwrap();
        assert!(matches!(
            index.search(&other, "x", &SearchParams::default()),
            Err(RetrievalError::ProviderMismatch { .. })
        ));
    }

    #[test]
    fn result_length_is_min_of_k_and_chunks() {
        let provider = HashEmbedder::default();
        let index = RetrievalIndex::build(&corpus(), &provider).unwrap();
        let p = SearchParams { k: 10, ..Default::default() };
        assert_eq!(index.search(&provider, "crack", &p).unwrap().hits.len(), 3);
    }

    #[test]
    fn lexical_fallback_ranks_by_overlap() {
        let provider = HashEmbedder::default();
        let index = RetrievalIndex::build(&corpus(), &provider).unwrap();
        let res = index
            .search_lexical("What does beta scan measure?", &SearchParams::default())
            .unwrap();
        assert_eq!(res.mode, RankingMode::Lexical);
        assert_eq!(res.hits[0].chunk.record_id, 20);
        assert!((res.hits[0].score - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn images_follow_hit_order() {
        let provider = HashEmbedder::default();
        let c = corpus();
        let index = RetrievalIndex::build(&c, &provider).unwrap();
        let chunks = index.chunks();
        let hits = vec![
            SearchHit { chunk: &chunks[2], score: 0.9 },
            SearchHit { chunk: &chunks[0], score: 0.8 },
            SearchHit { chunk: &chunks[1], score: 0.7 },
        ];
        assert_eq!(
            images_for(&c, &hits, 10),
            ["https://e.org/shared.png", "https://e.org/b1.png", "https://e.org/a1.png"]
        );
        assert_eq!(images_for(&c, &hits, 1), ["https://e.org/shared.png"]);
        assert!(images_for(&c, &[], 5).is_empty());
    }

    #[test]
    fn cache_round_trip_and_invalidation() {
        let provider = HashEmbedder::default();
        let c = corpus();
        let index = RetrievalIndex::build(&c, &provider).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        index.save_cache(&path, &c).unwrap();

        let loaded = RetrievalIndex::load_cache(&path, &c, &provider).unwrap().unwrap();
        assert_eq!(loaded.chunks(), index.chunks());

        let other = HashEmbedder::new(64).unwrap();
        assert!(RetrievalIndex::load_cache(&path, &c, &other).unwrap().is_none());

        let mut records = c.records().to_vec();
        records.pop();
        let smaller = Corpus::new(records, "t").unwrap();
        assert!(RetrievalIndex::load_cache(&path, &smaller, &provider).unwrap().is_none());
    }
}
