//! Test doubles shared by the workspace's integration tests: a stub
//! chat-completions server and a seeded synthetic corpus.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::sync::oneshot;

/// Path of a file under `crates/core/tests/fixtures`.
pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

#[derive(Debug, Clone)]
pub enum StubBehavior {
    /// 200 with this text as the assistant message.
    Canned(String),
    /// Sleep, then answer like `Canned`.
    Slow(Duration, String),
    /// Reply with this status and a short body.
    Status(u16),
    /// 200 with a body that is not a chat completion.
    Malformed,
}

#[derive(Clone)]
struct StubState {
    behavior: StubBehavior,
    requests: Arc<Mutex<Vec<Value>>>,
}

/// A chat-completions server on its own thread and runtime. Killing it drops
/// the runtime, which closes the listener and every open connection.
pub struct StubLlm {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<Value>>>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl StubLlm {
    pub fn start(behavior: StubBehavior) -> Self {
        let requests = Arc::new(Mutex::new(Vec::new()));
        let state = StubState { behavior, requests: Arc::clone(&requests) };
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("stub runtime");
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind stub");
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                let app = Router::new()
                    .route("/v1/chat/completions", post(completions))
                    .route("/v1/models", get(models))
                    .with_state(state);
                tokio::select! {
                    _ = axum::serve(listener, app) => {}
                    _ = stop_rx => {}
                }
            });
            runtime.shutdown_background();
        });
        let addr = addr_rx.recv().expect("stub address");
        StubLlm { addr, requests, stop: Some(stop_tx), thread: Some(thread) }
    }

    pub fn canned(text: &str) -> Self {
        Self::start(StubBehavior::Canned(text.to_string()))
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Chat-completion request bodies received so far.
    pub fn requests(&self) -> Vec<Value> {
        self.requests.lock().unwrap().clone()
    }

    pub fn kill(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StubLlm {
    fn drop(&mut self) {
        self.kill();
    }
}

async fn completions(State(state): State<StubState>, Json(body): Json<Value>) -> Response {
    state.requests.lock().unwrap().push(body);
    let reply = |text: &str| {
        Json(json!({
            "id": "stub-1",
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
        }))
        .into_response()
    };
    match &state.behavior {
        StubBehavior::Canned(text) => reply(text),
        StubBehavior::Slow(delay, text) => {
            tokio::time::sleep(*delay).await;
            reply(text)
        }
        StubBehavior::Status(code) => {
            let status = StatusCode::from_u16(*code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, "stub failure").into_response()
        }
        StubBehavior::Malformed => Json(json!({"unexpected": true})).into_response(),
    }
}

async fn models() -> Json<Value> {
    Json(json!({"object": "list", "data": [{"id": "stub-model", "object": "model"}]}))
}

/// A socket address with nothing listening on it.
pub fn dead_address() -> SocketAddr {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap()
}

const SECTION_KEYS: [&str; 9] = [
    "summary",
    "description",
    "physical_principle",
    "data_acquisition",
    "data_processing",
    "data_interpretation",
    "advantages",
    "limitations",
    "references",
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ne", "ra", "tu", "vo", "zi", "pe", "sa", "do", "gri", "fa", "hu", "jo", "be", "qui",
    "wen", "tor", "lex", "mar", "sil", "dun", "cor",
];

/// Deterministic pseudo-word vocabulary.
pub fn vocabulary(seed: u64, size: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = Vec::with_capacity(size);
    while out.len() < size {
        let n = rng.random_range(2..=4);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(&mut rng).unwrap()).collect();
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

fn sentence(rng: &mut ChaCha8Rng, vocab: &[String], words: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.random_range(words);
    let mut s = (0..n).map(|_| vocab.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ");
    s.push('.');
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => s,
    }
}

/// A corpus document of `records` technologies with 1 to 9 sections each.
pub fn synthetic_corpus(records: usize, seed: u64) -> Value {
    let vocab = vocabulary(seed, 300);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let recs: Vec<Value> = (0..records)
        .map(|i| {
            let mut sections = serde_json::Map::new();
            sections.insert("summary".into(), Value::String(sentence(&mut rng, &vocab, 8..=25)));
            for key in &SECTION_KEYS[1..] {
                if rng.random_bool(0.7) {
                    let sentences = rng.random_range(1..=3);
                    let text = (0..sentences)
                        .map(|_| sentence(&mut rng, &vocab, 4..=18))
                        .collect::<Vec<_>>()
                        .join(" ");
                    sections.insert((*key).into(), Value::String(text));
                }
            }
            let slug = format!("synthetic-technology-{i:03}");
            json!({
                "id": 5000 + i as u64 * 7,
                "name": format!("Synthetic Technology {i:03} {}", vocab[i % vocab.len()]),
                "sections": sections,
                "images": [format!("https://infotechnology.fhwa.dot.gov/wp-content/uploads/synthetic/{slug}.png")],
                "text_url": format!("https://infotechnology.fhwa.dot.gov/{slug}/"),
            })
        })
        .collect();
    json!({ "records": recs })
}

pub fn synthetic_corpus_bytes(records: usize, seed: u64) -> Vec<u8> {
    serde_json::to_vec(&synthetic_corpus(records, seed)).unwrap()
}

/// Queries mixing vocabulary words, common English words and a few
/// out-of-vocabulary tokens.
pub fn synthetic_queries(count: usize, seed: u64) -> Vec<String> {
    let vocab = vocabulary(seed, 300);
    let extra = ["what", "is", "how", "benefits", "technology", "synthetic", "xqzv", "007"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=7);
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.8) {
                        vocab.choose(&mut rng).unwrap().clone()
                    } else {
                        extra.choose(&mut rng).unwrap().to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Renders a corpus record as a technology page in the site's layout.
pub fn render_page(record: &Value) -> String {
    let title = |key: &str| {
        key.split('_')
            .map(|w| {
                let mut c = w.chars();
                c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let id = record["id"].as_u64().unwrap();
    let name = record["name"].as_str().unwrap();
    let mut body = String::new();
    for (key, text) in record["sections"].as_object().unwrap() {
        body.push_str(&format!("  <h2>{}</h2>\n  <p>{}</p>\n", title(key), text.as_str().unwrap()));
    }
    for img in record["images"].as_array().unwrap() {
        body.push_str(&format!("  <img src=\"{}\">\n", img.as_str().unwrap()));
    }
    format!(
        "<!doctype html>\n<html><head><title>{name} | InfoTechnology</title></head>\n\
         <body class=\"single postid-{id}\">\n<article>\n<h1>{name}</h1>\n<div class=\"entry-content\">\n{body}</div>\n</article>\n</body></html>\n"
    )
}

/// One brute-force hit: record id, section key, score.
pub type OracleHit = (u64, String, f64);

/// Reference top-k search straight from a corpus document: every
/// `"<name> — <key>: <content>"` is embedded once, then each query scores
/// all of them, fully sorts and truncates.
pub struct BruteForce<'e> {
    embed: &'e dyn Fn(&str) -> Vec<f64>,
    rows: Vec<(u64, String, Vec<f64>)>,
}

impl<'e> BruteForce<'e> {
    pub fn new(doc: &Value, embed: &'e dyn Fn(&str) -> Vec<f64>) -> Self {
        let mut rows = Vec::new();
        for record in doc["records"].as_array().unwrap() {
            let id = record["id"].as_u64().unwrap();
            let name = record["name"].as_str().unwrap();
            for (key, content) in record["sections"].as_object().unwrap() {
                let content = content.as_str().unwrap();
                if content.trim().is_empty() {
                    continue;
                }
                rows.push((id, key.clone(), embed(&format!("{name} — {key}: {content}"))));
            }
        }
        BruteForce { embed, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn top_k(&self, query: &str, k: usize) -> Vec<OracleHit> {
        let q = (self.embed)(query.trim());
        let mut all: Vec<OracleHit> =
            self.rows.iter().map(|(id, key, v)| (*id, key.clone(), oracle_cosine(&q, v))).collect();
        all.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}
