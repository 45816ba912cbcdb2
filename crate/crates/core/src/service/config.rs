//! Service configuration. Sources, strongest first: command-line overrides,
//! `INFOTECH_*` environment variables, a TOML file, built-in defaults.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::embedding::DEFAULT_HASH_DIMENSION;
use crate::generation::{DEFAULT_LLM_BASE_URL, DEFAULT_MAX_IN_FLIGHT, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::retrieval::{DEFAULT_NO_ANSWER_FLOOR, DEFAULT_TOP_K};

pub const ENV_LLM_BASE_URL: &str = "INFOTECH_LLM_BASE_URL";
pub const ENV_MODEL: &str = "INFOTECH_MODEL";
pub const ENV_CORPUS: &str = "INFOTECH_CORPUS";
pub const ENV_TEMPERATURE: &str = "INFOTECH_TEMPERATURE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    Remote,
    OfflineHash,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceConfig {
    pub corpus_path: PathBuf,
    pub llm_base_url: String,
    pub llm_model_name: String,
    /// Serve canned extractive summaries instead of calling the LLM.
    pub canned_llm: bool,
    pub embedding_mode: EmbeddingMode,
    pub embedding_base_url: String,
    pub embedding_model: String,
    pub hash_dimension: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub llm_timeout: Duration,
    pub llm_max_in_flight: usize,
    pub top_k: usize,
    pub no_answer_floor: f64,
    pub max_images: usize,
    pub bind_address: String,
    pub port: u16,
    pub static_dir: Option<PathBuf>,
    pub index_cache: Option<PathBuf>,
    pub system_prompt_path: Option<PathBuf>,
    pub probe_interval: Duration,
    pub grace_period: Duration,
    pub cors: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            corpus_path: PathBuf::from("corpus.json"),
            llm_base_url: DEFAULT_LLM_BASE_URL.to_string(),
            llm_model_name: "local-model".to_string(),
            canned_llm: false,
            embedding_mode: EmbeddingMode::Remote,
            embedding_base_url: DEFAULT_LLM_BASE_URL.to_string(),
            embedding_model: "all-mpnet-base-v2".to_string(),
            hash_dimension: DEFAULT_HASH_DIMENSION,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            llm_timeout: Duration::from_secs(60),
            llm_max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            top_k: DEFAULT_TOP_K,
            no_answer_floor: DEFAULT_NO_ANSWER_FLOOR,
            max_images: 6,
            bind_address: "127.0.0.1".to_string(),
            port: 8080,
            static_dir: None,
            index_cache: None,
            system_prompt_path: None,
            probe_interval: Duration::from_secs(30),
            grace_period: Duration::from_secs(10),
            cors: false,
        }
    }
}

/// Every setting, all optional. Used for both the TOML file and the
/// command-line layer.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub corpus_path: Option<PathBuf>,
    pub llm_base_url: Option<String>,
    pub llm_model_name: Option<String>,
    pub canned_llm: Option<bool>,
    pub embedding_mode: Option<EmbeddingMode>,
    pub embedding_base_url: Option<String>,
    pub embedding_model: Option<String>,
    pub hash_dimension: Option<usize>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub llm_timeout_secs: Option<f64>,
    pub llm_max_in_flight: Option<usize>,
    pub top_k: Option<usize>,
    pub no_answer_floor: Option<f64>,
    pub max_images: Option<usize>,
    pub bind_address: Option<String>,
    pub port: Option<u16>,
    pub static_dir: Option<PathBuf>,
    pub index_cache: Option<PathBuf>,
    pub system_prompt_path: Option<PathBuf>,
    pub probe_interval_secs: Option<f64>,
    pub grace_period_secs: Option<f64>,
    pub cors: Option<bool>,
}

impl ConfigOverrides {
    /// `--offline`: hash embeddings and canned summaries.
    pub fn offline() -> Self {
        ConfigOverrides {
            embedding_mode: Some(EmbeddingMode::OfflineHash),
            canned_llm: Some(true),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ServiceError> {
        let temperature = match lookup(ENV_TEMPERATURE) {
            Some(t) => Some(
                t.parse::<f64>()
                    .map_err(|_| ServiceError::Config(format!("{ENV_TEMPERATURE}={t:?} is not a number")))?,
            ),
            None => None,
        };
        Ok(ConfigOverrides {
            llm_base_url: lookup(ENV_LLM_BASE_URL),
            llm_model_name: lookup(ENV_MODEL),
            corpus_path: lookup(ENV_CORPUS).map(PathBuf::from),
            temperature,
            ..Default::default()
        })
    }

    fn apply(&self, c: &mut ServiceConfig) -> Result<(), ServiceError> {
        fn secs(name: &str, v: f64) -> Result<Duration, ServiceError> {
            Duration::try_from_secs_f64(v).map_err(|_| ServiceError::Config(format!("{name} must be a non-negative number")))
        }
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = &self.$field { c.$field = v.clone(); } )* };
        }
        set!(
            corpus_path, llm_base_url, llm_model_name, canned_llm, embedding_mode, embedding_base_url,
            embedding_model, hash_dimension, temperature, max_tokens, llm_max_in_flight, top_k,
            no_answer_floor, max_images, bind_address, port, cors
        );
        if let Some(v) = &self.static_dir {
            c.static_dir = Some(v.clone());
        }
        if let Some(v) = &self.index_cache {
            c.index_cache = Some(v.clone());
        }
        if let Some(v) = &self.system_prompt_path {
            c.system_prompt_path = Some(v.clone());
        }
        if let Some(v) = self.llm_timeout_secs {
            c.llm_timeout = secs("llm_timeout_secs", v)?;
        }
        if let Some(v) = self.probe_interval_secs {
            c.probe_interval = secs("probe_interval_secs", v)?;
        }
        if let Some(v) = self.grace_period_secs {
            c.grace_period = secs("grace_period_secs", v)?;
        }
        Ok(())
    }
}

impl ServiceConfig {
    /// Layers defaults, file, environment and flags, then validates.
    pub fn resolve(
        file: Option<&Path>,
        env: &ConfigOverrides,
        flags: &ConfigOverrides,
    ) -> Result<Self, ServiceError> {
        let mut config = ServiceConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ServiceError::Config(format!("cannot read config file {}: {e}", path.display())))?;
            ConfigOverrides::from_toml(&text)?.apply(&mut config)?;
        }
        env.apply(&mut config)?;
        flags.apply(&mut config)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(ServiceError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == 0 {
            return Err(ServiceError::Config("top_k must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(ServiceError::Config("max_tokens must be at least 1".into()));
        }
        if self.llm_timeout.is_zero() {
            return Err(ServiceError::Config("llm timeout must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.no_answer_floor) {
            return Err(ServiceError::Config("no_answer_floor must be within [-1, 1]".into()));
        }
        Ok(())
    }

    /// Checks that every configured path exists.
    pub fn check_paths(&self) -> Result<(), ServiceError> {
        if !self.corpus_path.is_file() {
            return Err(ServiceError::MissingPath { what: "corpus file", path: self.corpus_path.clone() });
        }
        if let Some(dir) = &self.static_dir {
            if !dir.is_dir() {
                return Err(ServiceError::MissingPath { what: "static asset directory", path: dir.clone() });
            }
        }
        if let Some(p) = &self.system_prompt_path {
            if !p.is_file() {
                return Err(ServiceError::MissingPath { what: "system prompt file", path: p.clone() });
            }
        }
        Ok(())
    }

    pub fn socket_addr(&self) -> Result<SocketAddr, ServiceError> {
        format!("{}:{}", self.bind_address, self.port)
            .parse()
            .map_err(|e| ServiceError::Config(format!("bad bind address {}:{}: {e}", self.bind_address, self.port)))
    }
}
