//! HTTP front door: `POST /api/query`, `GET /api/health`, `GET /api/config`
//! and the static chat UI at `/`.

pub mod config;
pub mod pipeline;

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;
use tracing::{error, info, warn};

pub use config::{ConfigOverrides, EmbeddingMode, ServiceConfig};
pub use pipeline::{Engine, PipelineOptions};

use crate::corpus::{parse_corpus, CorpusError};
use crate::embedding::{EmbeddingError, EmbeddingProvider, HashEmbedder, RemoteEmbedder};
use crate::generation::{ChatClient, DualResponse, GenerationError, GenerationParams, PromptTemplate, Source, Summarizer};
use crate::retrieval::{RetrievalError, RetrievalIndex, SearchParams};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{what} not found: {}", path.display())]
    MissingPath { what: &'static str, path: PathBuf },
    #[error("cannot load corpus {}: {source}", path.display())]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("embedding provider: {0}")]
    Embedding(#[from] EmbeddingError),
    #[error("generation setup: {0}")]
    Generation(#[from] GenerationError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("query is empty")]
    EmptyQuery,
    #[error("service is still building its index")]
    Initializing,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::EmptyQuery | ServiceError::Retrieval(RetrievalError::EmptyQuery) => StatusCode::BAD_REQUEST,
            ServiceError::Initializing => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub bot_response: String,
    pub llm_response: Option<String>,
    pub images: Vec<String>,
    pub sources: Vec<Source>,
    pub low_confidence: bool,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub degraded_reason: Option<String>,
    pub latency_ms: u64,
}

impl QueryResponse {
    pub fn from_dual(dual: DualResponse, latency: Duration) -> Self {
        QueryResponse {
            bot_response: dual.bot_text,
            llm_response: dual.llm_text,
            images: dual.images,
            sources: dual.sources,
            low_confidence: dual.low_confidence,
            degraded: dual.degraded,
            degraded_reason: dual.degraded_reason,
            latency_ms: latency.as_millis().try_into().unwrap_or(u64::MAX),
        }
    }

    pub fn into_dual(self) -> DualResponse {
        DualResponse {
            bot_text: self.bot_response,
            llm_text: self.llm_response,
            images: self.images,
            sources: self.sources,
            low_confidence: self.low_confidence,
            degraded: self.degraded,
            degraded_reason: self.degraded_reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub status: String,
    pub record_count: Option<usize>,
    pub chunk_count: Option<usize>,
    pub provider_identity: Option<String>,
    pub llm_endpoint: String,
    pub llm_reachable: Option<bool>,
    pub uptime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicConfig {
    pub llm_base_url: String,
    pub llm_model_name: String,
    pub canned_llm: bool,
    pub embedding_mode: EmbeddingMode,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_k: usize,
    pub no_answer_floor: f64,
    pub max_images: usize,
}

impl From<&ServiceConfig> for PublicConfig {
    fn from(c: &ServiceConfig) -> Self {
        PublicConfig {
            llm_base_url: c.llm_base_url.clone(),
            llm_model_name: c.llm_model_name.clone(),
            canned_llm: c.canned_llm,
            embedding_mode: c.embedding_mode,
            temperature: c.temperature,
            max_tokens: c.max_tokens,
            top_k: c.top_k,
            no_answer_floor: c.no_answer_floor,
            max_images: c.max_images,
        }
    }
}

/// Shared handler state. The engine slot stays empty until the index is
/// built.
#[derive(Clone)]
pub struct AppState {
    engine: Arc<OnceLock<Arc<Engine>>>,
    started: Instant,
    llm_endpoint: String,
    llm_reachable: Arc<Mutex<Option<bool>>>,
    public_config: Arc<PublicConfig>,
}

impl AppState {
    pub fn new(config: &ServiceConfig) -> Self {
        AppState {
            engine: Arc::new(OnceLock::new()),
            started: Instant::now(),
            llm_endpoint: if config.canned_llm { "canned".to_string() } else { config.llm_base_url.clone() },
            llm_reachable: Arc::new(Mutex::new(None)),
            public_config: Arc::new(PublicConfig::from(config)),
        }
    }

    /// Installs a built engine; later calls are ignored.
    pub fn set_engine(&self, engine: Arc<Engine>) {
        let _ = self.engine.set(engine);
    }

    pub fn engine(&self) -> Option<&Arc<Engine>> {
        self.engine.get()
    }

    pub fn set_llm_reachable(&self, reachable: bool) {
        *self.llm_reachable.lock().expect("probe lock") = Some(reachable);
    }

    pub async fn handle_query(&self, request: QueryRequest) -> Result<QueryResponse, ServiceError> {
        let clock = Instant::now();
        if request.query.trim().is_empty() {
            return Err(ServiceError::EmptyQuery);
        }
        let engine = self.engine().ok_or(ServiceError::Initializing)?;
        let dual = engine.answer(&request.query).await?;
        Ok(QueryResponse::from_dual(dual, clock.elapsed()))
    }

    pub fn health(&self) -> HealthStatus {
        let engine = self.engine();
        HealthStatus {
            status: if engine.is_some() { "ok" } else { "initializing" }.to_string(),
            record_count: engine.map(|e| e.corpus().len()),
            chunk_count: engine.map(|e| e.index().chunks().len()),
            provider_identity: engine.map(|e| e.index().provider_identity().to_string()),
            llm_endpoint: self.llm_endpoint.clone(),
            llm_reachable: *self.llm_reachable.lock().expect("probe lock"),
            uptime_secs: self.started.elapsed().as_secs_f64(),
        }
    }
}

async fn query_handler(
    State(state): State<AppState>,
    Json(request): Json<QueryRequest>,
) -> Result<Json<QueryResponse>, ServiceError> {
    state.handle_query(request).await.map(Json).map_err(|e| {
        if e.status().is_server_error() {
            error!(error = %e, "query failed");
        }
        e
    })
}

async fn health_handler(State(state): State<AppState>) -> Json<HealthStatus> {
    Json(state.health())
}

async fn config_handler(State(state): State<AppState>) -> Json<PublicConfig> {
    Json((*state.public_config).clone())
}

const PLACEHOLDER_PAGE: &str = "<!doctype html><html><head><meta charset=\"utf-8\"><title>InfoTech Assistant</title></head>\
<body><h1>InfoTech Assistant</h1><p>The chat UI assets are not installed. \
Configure <code>static_dir</code> or use <code>POST /api/query</code> directly.</p></body></html>";

/// Routes for the API plus the UI assets.
pub fn router(state: AppState, static_dir: Option<PathBuf>, cors: bool) -> Router {
    let api = Router::new()
        .route("/api/query", post(query_handler))
        .route("/api/health", get(health_handler))
        .route("/api/config", get(config_handler))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_PAGE) })),
    };
    if cors {
        app.layer(CorsLayer::permissive())
    } else {
        app
    }
}

/// Constructs the embedding provider the config asks for.
pub fn make_provider(config: &ServiceConfig) -> Result<Arc<dyn EmbeddingProvider>, ServiceError> {
    Ok(match config.embedding_mode {
        EmbeddingMode::OfflineHash => Arc::new(HashEmbedder::new(config.hash_dimension)?),
        EmbeddingMode::Remote => Arc::new(RemoteEmbedder::connect(
            &config.embedding_base_url,
            &config.embedding_model,
            config.llm_timeout,
        )?),
    })
}

pub fn make_summarizer(config: &ServiceConfig) -> Result<Summarizer, ServiceError> {
    if config.canned_llm {
        return Ok(Summarizer::Canned);
    }
    let params = GenerationParams {
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        model_name: config.llm_model_name.clone(),
        timeout: config.llm_timeout,
    };
    Ok(Summarizer::Remote(ChatClient::with_max_in_flight(
        &config.llm_base_url,
        params,
        config.llm_max_in_flight,
    )?))
}

pub fn make_prompt(config: &ServiceConfig) -> Result<PromptTemplate, ServiceError> {
    let prompt = PromptTemplate::default();
    Ok(match &config.system_prompt_path {
        Some(p) => prompt.with_instructions_file(p)?,
        None => prompt,
    })
}

pub fn pipeline_options(config: &ServiceConfig) -> PipelineOptions {
    PipelineOptions {
        search: SearchParams { k: config.top_k, no_answer_floor: config.no_answer_floor },
        max_images: config.max_images,
    }
}

/// Loads the corpus and builds (or reuses a cached) engine. Blocking.
pub fn build_engine(config: &ServiceConfig) -> Result<Engine, ServiceError> {
    let bytes = std::fs::read(&config.corpus_path)
        .map_err(|source| ServiceError::Io { path: config.corpus_path.clone(), source })?;
    let corpus = parse_corpus(&bytes, &config.corpus_path.display().to_string())
        .map_err(|source| ServiceError::Corpus { path: config.corpus_path.clone(), source })?;
    let provider = make_provider(config)?;
    let index = match &config.index_cache {
        Some(cache) => load_or_build_index(cache, &corpus, provider.as_ref())?,
        None => RetrievalIndex::build(&corpus, provider.as_ref())?,
    };
    Ok(Engine::new(
        corpus,
        index,
        provider,
        make_summarizer(config)?,
        make_prompt(config)?,
        pipeline_options(config),
    ))
}

fn load_or_build_index(
    cache: &std::path::Path,
    corpus: &crate::corpus::Corpus,
    provider: &dyn EmbeddingProvider,
) -> Result<RetrievalIndex, ServiceError> {
    if cache.exists() {
        match RetrievalIndex::load_cache(cache, corpus, provider) {
            Ok(Some(index)) => {
                info!(path = %cache.display(), "reusing cached index");
                return Ok(index);
            }
            Ok(None) => info!(path = %cache.display(), "index cache is stale, rebuilding"),
            Err(e) => warn!(error = %e, "ignoring unreadable index cache"),
        }
    }
    let index = RetrievalIndex::build(corpus, provider)?;
    if let Err(e) = index.save_cache(cache, corpus) {
        warn!(error = %e, "could not write index cache");
    }
    Ok(index)
}

/// A bound, not-yet-serving instance.
pub struct Service {
    listener: TcpListener,
    state: AppState,
    config: ServiceConfig,
}

impl Service {
    /// Validates the config, checks the corpus parses and binds the socket.
    /// The index itself is built once [`Service::run`] starts.
    pub async fn bind(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        config.check_paths()?;
        let bytes = std::fs::read(&config.corpus_path)
            .map_err(|source| ServiceError::Io { path: config.corpus_path.clone(), source })?;
        parse_corpus(&bytes, "startup check")
            .map_err(|source| ServiceError::Corpus { path: config.corpus_path.clone(), source })?;
        let addr = config.socket_addr()?;
        let listener = TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })?;
        Ok(Service { listener, state: AppState::new(&config), config })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    /// Serves until `shutdown` resolves, then lets in-flight requests finish
    /// for up to the configured grace period.
    pub async fn run<F>(self, shutdown: F) -> Result<(), ServiceError>
    where
        F: Future<Output = ()> + Send + 'static,
    {
        let Service { listener, state, config } = self;
        let addr = listener.local_addr().ok();
        let app = router(state.clone(), config.static_dir.clone(), config.cors);

        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let server = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = stop_rx.await;
        });
        let mut server = tokio::spawn(async move { server.await });

        let build_config = config.clone();
        let mut build = tokio::task::spawn_blocking(move || build_engine(&build_config));
        let probe = spawn_probe(&state, &config);

        tokio::pin!(shutdown);
        let mut build_done = false;
        info!(?addr, "listening");
        let outcome = loop {
            tokio::select! {
                res = &mut build, if !build_done => {
                    build_done = true;
                    match res {
                        Ok(Ok(engine)) => {
                            info!(
                                records = engine.corpus().len(),
                                chunks = engine.index().chunks().len(),
                                "index ready"
                            );
                            state.set_engine(Arc::new(engine));
                        }
                        Ok(Err(e)) => break Err(e),
                        Err(e) => break Err(ServiceError::Internal(format!("index build task: {e}"))),
                    }
                }
                res = &mut server => {
                    break match res {
                        Ok(Ok(())) => Ok(()),
                        Ok(Err(e)) => Err(ServiceError::Internal(format!("server: {e}"))),
                        Err(e) => Err(ServiceError::Internal(format!("server task: {e}"))),
                    };
                }
                _ = &mut shutdown => {
                    info!("shutdown requested, draining in-flight requests");
                    break Ok(());
                }
            }
        };
        if let Some(p) = probe {
            p.abort();
        }
        let _ = stop_tx.send(());
        if tokio::time::timeout(config.grace_period, &mut server).await.is_err() {
            warn!("grace period elapsed with requests still in flight");
            server.abort();
        }
        outcome
    }
}

fn spawn_probe(state: &AppState, config: &ServiceConfig) -> Option<tokio::task::JoinHandle<()>> {
    if config.canned_llm {
        state.set_llm_reachable(true);
        return None;
    }
    let client = match make_summarizer(config) {
        Ok(Summarizer::Remote(client)) => client,
        _ => return None,
    };
    let state = state.clone();
    let interval = config.probe_interval.max(Duration::from_millis(100));
    Some(tokio::spawn(async move {
        let mut ticker = tokio::time::interval(interval);
        loop {
            ticker.tick().await;
            let ok = client.probe(Duration::from_secs(5)).await;
            state.set_llm_reachable(ok);
        }
    }))
}

/// Binds and serves until `shutdown` resolves.
pub async fn serve<F>(config: ServiceConfig, shutdown: F) -> Result<(), ServiceError>
where
    F: Future<Output = ()> + Send + 'static,
{
    Service::bind(config).await?.run(shutdown).await
}
