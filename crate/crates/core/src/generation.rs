//! LLM side of the pipeline: temperature softmax, prompt assembly, the
//! chat-completions client and the bot/LLM answer composer.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::corpus::Corpus;
use crate::retrieval::SearchHit;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_LLM_BASE_URL: &str = "http://localhost:1234";
pub const DEFAULT_CONTEXT_BUDGET: usize = 8000;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Bot text returned when retrieval produced nothing.
pub const NO_ANSWER_MESSAGE: &str =
    "No relevant information was found in the technology records for this question.";

const SYSTEM_PROMPT: &str = include_str!("../assets/system-prompt-v1.txt");
const NO_CONTEXT_PROMPT: &str = include_str!("../assets/no-context-v1.txt");

#[derive(Debug, Error, PartialEq)]
pub enum GenerationError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("logit vector is empty")]
    EmptyLogits,
    #[error("logit {0} is not finite")]
    NonFiniteLogit(usize),
    #[error("max_tokens must be positive")]
    MaxTokens,
    #[error("timeout must be positive")]
    Timeout,
    #[error("cannot read prompt asset {path}: {message}")]
    PromptAsset { path: String, message: String },
}

/// Finite logits, at least one.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self, GenerationError> {
        if logits.is_empty() {
            return Err(GenerationError::EmptyLogits);
        }
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(GenerationError::NonFiniteLogit(i));
        }
        Ok(LogitVector(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityDistribution(Vec<f64>);

impl ProbabilityDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `P_i = exp(z_i / T) / Σ_j exp(z_j / T)`, evaluated with the maximum
/// scaled logit subtracted first.
pub fn softmax_with_temperature(
    logits: &LogitVector,
    temperature: f64,
) -> Result<ProbabilityDistribution, GenerationError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(GenerationError::Temperature(temperature));
    }
    let scaled: Vec<f64> = logits.0.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbabilityDistribution(exps.into_iter().map(|e| e / total).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_name: String,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            model_name: "local-model".to_string(),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(GenerationError::Temperature(self.temperature));
        }
        if self.max_tokens == 0 {
            return Err(GenerationError::MaxTokens);
        }
        if self.timeout.is_zero() {
            return Err(GenerationError::Timeout);
        }
        Ok(())
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
}

/// The instruction text sent as the system message, plus the context budget.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub instructions: String,
    pub no_context: String,
    pub context_budget_chars: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            instructions: SYSTEM_PROMPT.trim_end().to_string(),
            no_context: NO_CONTEXT_PROMPT.trim_end().to_string(),
            context_budget_chars: DEFAULT_CONTEXT_BUDGET,
        }
    }
}

impl PromptTemplate {
    /// Replaces the built-in instructions with the contents of `path`.
    pub fn with_instructions_file(mut self, path: &Path) -> Result<Self, GenerationError> {
        let text = std::fs::read_to_string(path).map_err(|e| GenerationError::PromptAsset {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.instructions = text.trim_end().to_string();
        Ok(self)
    }

    pub fn build(&self, query: &str, hits: &[SearchHit<'_>]) -> Vec<ChatMessage> {
        let blocks: Vec<String> = hits
            .iter()
            .map(|h| format!("[{} / {}]\n{}", h.chunk.record_name, h.chunk.section_key, h.chunk.content))
            .collect();
        // Hits arrive best-first, so dropping from the tail drops the
        // lowest-ranked passages.
        let mut kept = blocks.len();
        while kept > 0 && context_len(&blocks[..kept]) > self.context_budget_chars {
            kept -= 1;
        }
        let system = if kept == 0 {
            format!("{}\n\n{}", self.instructions, self.no_context)
        } else {
            format!("{}\n\nContext:\n\n{}", self.instructions, blocks[..kept].join("\n\n"))
        };
        vec![ChatMessage::system(system), ChatMessage::user(query)]
    }
}

fn context_len(blocks: &[String]) -> usize {
    let text: usize = blocks.iter().map(|b| b.chars().count()).sum();
    text + 2 * blocks.len().saturating_sub(1)
}

/// Builds the chat messages with the default template.
pub fn build_prompt(query: &str, hits: &[SearchHit<'_>]) -> Vec<ChatMessage> {
    PromptTemplate::default().build(query, hits)
}

/// Why the LLM summary is missing. Never an error for the service; the
/// composer turns it into a bot-only answer.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Degraded {
    #[error("LLM request timed out")]
    Timeout,
    #[error("LLM endpoint unreachable: {0}")]
    Connect(String),
    #[error("LLM endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("LLM response malformed: {0}")]
    Malformed(String),
}

pub type LlmOutcome = Result<String, Degraded>;

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Client for `POST <base>/v1/chat/completions`.
#[derive(Clone)]
pub struct ChatClient {
    http: reqwest::Client,
    base_url: String,
    params: GenerationParams,
    permits: Arc<Semaphore>,
}

impl ChatClient {
    pub fn new(base_url: &str, params: GenerationParams) -> Result<Self, GenerationError> {
        Self::with_max_in_flight(base_url, params, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_max_in_flight(
        base_url: &str,
        params: GenerationParams,
        max_in_flight: usize,
    ) -> Result<Self, GenerationError> {
        params.validate()?;
        let http = reqwest::Client::builder()
            .timeout(params.timeout)
            .build()
            .expect("reqwest client builds with a timeout only");
        Ok(ChatClient {
            http,
            base_url: base_url.trim_end_matches('/').to_string(),
            params,
            permits: Arc::new(Semaphore::new(max_in_flight.max(1))),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn params(&self) -> &GenerationParams {
        &self.params
    }

    /// Sends the messages and returns the first choice's content, trimmed.
    pub async fn generate_summary(&self, messages: &[ChatMessage]) -> LlmOutcome {
        let _permit = self.permits.acquire().await.expect("semaphore never closes");
        let body = ChatRequest {
            model: &self.params.model_name,
            messages,
            temperature: self.params.temperature,
            max_tokens: self.params.max_tokens,
        };
        let url = format!("{}/v1/chat/completions", self.base_url);
        let response = self.http.post(&url).json(&body).send().await.map_err(classify_reqwest)?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(Degraded::Status {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        let bytes = response.bytes().await.map_err(classify_reqwest)?;
        let parsed: ChatResponse =
            serde_json::from_slice(&bytes).map_err(|e| Degraded::Malformed(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Degraded::Malformed("no choices[0].message.content".into()))?;
        let content = content.trim();
        if content.is_empty() {
            return Err(Degraded::Malformed("empty completion".into()));
        }
        Ok(content.to_string())
    }

    /// Cheap reachability check against `GET <base>/v1/models`.
    pub async fn probe(&self, timeout: Duration) -> bool {
        let url = format!("{}/v1/models", self.base_url);
        matches!(
            self.http.get(&url).timeout(timeout).send().await,
            Ok(r) if r.status().is_success()
        )
    }
}

fn classify_reqwest(e: reqwest::Error) -> Degraded {
    if e.is_timeout() {
        Degraded::Timeout
    } else if e.is_connect() {
        Degraded::Connect(e.to_string())
    } else if e.is_decode() || e.is_body() {
        Degraded::Malformed(e.to_string())
    } else {
        Degraded::Connect(e.to_string())
    }
}

/// Where LLM summaries come from.
#[derive(Clone)]
pub enum Summarizer {
    Remote(ChatClient),
    /// Deterministic stand-in for demos: the first sentence of each passage.
    Canned,
}

impl Summarizer {
    pub async fn summarize(&self, messages: &[ChatMessage], hits: &[SearchHit<'_>]) -> LlmOutcome {
        match self {
            Summarizer::Remote(client) => client.generate_summary(messages).await,
            Summarizer::Canned => Ok(canned_summary(hits)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Summarizer::Remote(client) => client.params().model_name.clone(),
            Summarizer::Canned => "canned".to_string(),
        }
    }
}

pub fn canned_summary(hits: &[SearchHit<'_>]) -> String {
    if hits.is_empty() {
        return "I could not find information about that in the technology records.".to_string();
    }
    hits.iter()
        .map(|h| first_sentence(&h.chunk.content))
        .collect::<Vec<_>>()
        .join(" ")
}

fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    match text.find(". ") {
        Some(i) => &text[..=i],
        None => text,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub record_id: u64,
    pub record_name: String,
    pub section_key: String,
    pub score: f64,
    pub text_url: String,
}

/// Verbatim source text ("bot") paired with the generated summary ("llm").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualResponse {
    pub bot_text: String,
    pub llm_text: Option<String>,
    pub images: Vec<String>,
    pub sources: Vec<Source>,
    pub low_confidence: bool,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub degraded_reason: Option<String>,
}

/// Prefix placed before each passage in the bot text.
pub fn passage_prefix(record_name: &str, section_key: &str) -> String {
    format!("{record_name} — {section_key}:")
}

pub fn compose_answer(
    corpus: &Corpus,
    hits: &[SearchHit<'_>],
    images: Vec<String>,
    low_confidence: bool,
    llm: LlmOutcome,
) -> DualResponse {
    let (llm_text, degraded_reason) = match llm {
        Ok(text) => (Some(text), None),
        Err(reason) => (None, Some(reason.to_string())),
    };
    let degraded = llm_text.is_none();
    if hits.is_empty() {
        return DualResponse {
            bot_text: NO_ANSWER_MESSAGE.to_string(),
            llm_text,
            images: Vec::new(),
            sources: Vec::new(),
            low_confidence: true,
            degraded,
            degraded_reason,
        };
    }
    let bot_text = hits
        .iter()
        .map(|h| format!("{} {}", passage_prefix(&h.chunk.record_name, &h.chunk.section_key), h.chunk.content))
        .collect::<Vec<_>>()
        .join("\n\n");
    let sources = hits
        .iter()
        .map(|h| Source {
            record_id: h.chunk.record_id,
            record_name: h.chunk.record_name.clone(),
            section_key: h.chunk.section_key.clone(),
            score: h.score,
            text_url: corpus
                .get(h.chunk.record_id)
                .map(|r| r.text_url.clone())
                .unwrap_or_default(),
        })
        .collect();
    DualResponse {
        bot_text,
        llm_text,
        images,
        sources,
        low_confidence,
        degraded,
        degraded_reason,
    }
}
