//! The query pipeline: search, images, prompt, summary, composition.

use std::sync::Arc;

use tracing::warn;

use super::ServiceError;
use crate::corpus::Corpus;
use crate::embedding::EmbeddingProvider;
use crate::generation::{compose_answer, DualResponse, PromptTemplate, Summarizer};
use crate::retrieval::{images_for, RankingMode, RetrievalError, RetrievalIndex, SearchHit, SearchParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub search: SearchParams,
    pub max_images: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { search: SearchParams::default(), max_images: 6 }
    }
}

/// Ranked chunk positions, detached from the index borrow so they can cross
/// a blocking-task boundary.
struct Ranked {
    hits: Vec<(usize, f64)>,
    low_confidence: bool,
    mode: RankingMode,
}

/// Everything a query needs, immutable once built.
pub struct Engine {
    corpus: Corpus,
    index: RetrievalIndex,
    provider: Arc<dyn EmbeddingProvider>,
    summarizer: Summarizer,
    prompt: PromptTemplate,
    options: PipelineOptions,
}

impl Engine {
    pub fn new(
        corpus: Corpus,
        index: RetrievalIndex,
        provider: Arc<dyn EmbeddingProvider>,
        summarizer: Summarizer,
        prompt: PromptTemplate,
        options: PipelineOptions,
    ) -> Self {
        Engine { corpus, index, provider, summarizer, prompt, options }
    }

    /// Builds the index from scratch.
    pub fn build(
        corpus: Corpus,
        provider: Arc<dyn EmbeddingProvider>,
        summarizer: Summarizer,
        prompt: PromptTemplate,
        options: PipelineOptions,
    ) -> Result<Self, ServiceError> {
        let index = RetrievalIndex::build(&corpus, provider.as_ref())?;
        Ok(Engine::new(corpus, index, provider, summarizer, prompt, options))
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn index(&self) -> &RetrievalIndex {
        &self.index
    }

    pub fn summarizer(&self) -> &Summarizer {
        &self.summarizer
    }

    fn rank(&self, query: &str) -> Result<Ranked, RetrievalError> {
        let results = match self.index.search(self.provider.as_ref(), query, &self.options.search) {
            Ok(r) => r,
            Err(RetrievalError::QueryEmbedding(e)) => {
                warn!(error = %e, "embedding provider failed, falling back to keyword ranking");
                self.index.search_lexical(query, &self.options.search)?
            }
            Err(e) => return Err(e),
        };
        let chunks = self.index.chunks();
        let hits = results
            .hits
            .iter()
            .map(|h| {
                let pos = chunks
                    .iter()
                    .position(|c| std::ptr::eq(c, h.chunk))
                    .expect("hit points into the index");
                (pos, h.score)
            })
            .collect();
        Ok(Ranked { hits, low_confidence: results.low_confidence, mode: results.mode })
    }

    /// Runs the full pipeline for one query. LLM failures never surface as
    /// errors; they yield a degraded answer.
    pub async fn answer(self: &Arc<Self>, query: &str) -> Result<DualResponse, ServiceError> {
        let query = query.trim().to_string();
        if query.is_empty() {
            return Err(ServiceError::EmptyQuery);
        }
        let engine = Arc::clone(self);
        let q = query.clone();
        let ranked = tokio::task::spawn_blocking(move || engine.rank(&q))
            .await
            .map_err(|e| ServiceError::Internal(format!("search task failed: {e}")))??;

        let chunks = self.index.chunks();
        let hits: Vec<SearchHit<'_>> = ranked
            .hits
            .iter()
            .map(|(pos, score)| SearchHit { chunk: &chunks[*pos], score: *score })
            .collect();
        let images = images_for(&self.corpus, &hits, self.options.max_images);
        let messages = self.prompt.build(&query, &hits);
        let llm = self.summarizer.summarize(&messages, &hits).await;
        if let Err(reason) = &llm {
            warn!(%reason, "LLM unavailable, answering bot-only");
        }
        let low_confidence = ranked.low_confidence || ranked.mode == RankingMode::Lexical;
        Ok(compose_answer(&self.corpus, &hits, images, low_confidence, llm))
    }
}
