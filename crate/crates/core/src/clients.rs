//! Text-generation and text-embedding clients.
//!
//! Real endpoints are reached over HTTP POST with JSON bodies; the offline
//! substitutes (a seed-deterministic generator and a feature-hashing
//! embedder) need no network and are used whenever no endpoint is set.

use std::hash::Hasher;
use std::sync::OnceLock;
use std::time::Duration;

use fnv::FnvHasher;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GEN_ENDPOINT_VAR: &str = "GEN_ENDPOINT";
pub const EMBED_ENDPOINT_VAR: &str = "EMBED_ENDPOINT";
pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint error: {0}")]
    EndpointError(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("cannot embed empty text")]
    EmptyText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_tokens == 0 {
            return Err(ClientError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ClientError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ClientError>;
}

/// Unit-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// L2-normalizes `values`; `None` for a zero or non-finite vector.
    pub fn normalized(values: Vec<f64>) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        Some(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity, clamped to [-1, 1]. Vectors of different
    /// dimension compare over their common prefix.
    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return 0.0;
        }
        (dot / denom).clamp(-1.0, 1.0)
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ClientError>;
}

/// Feature-hashed character n-grams (n = 1..=3), counted into `dim`
/// buckets and L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub const MAX_N: usize = 3;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bucket(&self, ngram: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(ngram.as_bytes());
        (h.finish() % self.dim as u64) as usize
    }

    /// Every character n-gram of `text` for n = 1..=3, with multiplicity.
    pub fn ngrams(text: &str) -> Vec<&str> {
        let bounds: Vec<usize> = text
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(text.len()))
            .collect();
        let chars = bounds.len() - 1;
        let mut out = Vec::new();
        for n in 1..=Self::MAX_N {
            for start in 0..chars.saturating_sub(n - 1) {
                out.push(&text[bounds[start]..bounds[start + n]]);
            }
        }
        out
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ClientError> {
        if text.is_empty() {
            return Err(ClientError::EmptyText);
        }
        let mut counts = vec![0.0; self.dim];
        for g in Self::ngrams(text) {
            counts[self.bucket(g)] += 1.0;
        }
        Ok(EmbeddingVector::normalized(counts).expect("non-empty text has at least one n-gram"))
    }
}

/// Offline generator. Prompts built from the QA-generation template get a
/// well-formed QA array derived from the quoted legal text; anything else
/// gets a canned sentence. Output depends only on (prompt, seed).
#[derive(Debug, Clone, Copy, Default)]
pub struct StubGenerator;

const CANNED: [&str; 4] = [
    "本院认为，被告人的行为已构成犯罪，依法应予惩处。",
    "经审理查明的事实清楚，证据确实、充分。",
    "判决如下：被告人犯故意伤害罪，判处有期徒刑一年。",
    "综上所述，依照相关法律规定，作出如上决定。",
];

fn qa_prompt_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?s)The following is a piece of legal text:\s*(?P<text>.*?)\s*\nPlease generate (?P<n>\d+) high-quality")
            .expect("qa prompt regex")
    })
}

fn split_sentences(text: &str) -> Vec<&str> {
    text.split_inclusive(['。', '；', ';', '！', '？', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

fn fnv(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FnvHasher::with_key(seed ^ 0xcbf2_9ce4_8422_2325);
    h.write(bytes);
    h.finish()
}

impl Generator for StubGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ClientError> {
        req.validate()?;
        let seed = req.seed.unwrap_or(0);
        if let Some(caps) = qa_prompt_re().captures(&req.prompt) {
            let text = caps.name("text").map_or("", |m| m.as_str());
            let n: usize = caps["n"].parse().unwrap_or(1);
            let sentences = split_sentences(text);
            if !sentences.is_empty() {
                let offset = (fnv(text.as_bytes(), seed) % sentences.len() as u64) as usize;
                let pairs: Vec<serde_json::Value> = (0..n)
                    .map(|k| {
                        let answer = sentences[(offset + k) % sentences.len()];
                        serde_json::json!({
                            "input": format!("根据上述条文，第{}个要点是什么？", k + 1),
                            "output": answer,
                        })
                    })
                    .collect();
                return Ok(format!(
                    "以下是生成的问答对：\n{}",
                    serde_json::to_string_pretty(&pairs).expect("json")
                ));
            }
        }
        let pick = (fnv(req.prompt.as_bytes(), seed) % CANNED.len() as u64) as usize;
        Ok(CANNED[pick].to_string())
    }
}

fn agent(timeout_ms: u64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(timeout_ms)))
        .build()
        .into()
}

fn map_ureq(err: ureq::Error) -> ClientError {
    match err {
        ureq::Error::Timeout(_) => ClientError::Timeout,
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => ClientError::Timeout,
        other => ClientError::EndpointError(other.to_string()),
    }
}

fn post_json<T: serde::de::DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    body: &impl Serialize,
) -> Result<T, ClientError> {
    let mut resp = agent.post(url).send_json(body).map_err(map_ureq)?;
    let raw = resp.body_mut().read_to_string().map_err(map_ureq)?;
    serde_json::from_str(&raw).map_err(|e| ClientError::MalformedResponse(e.to_string()))
}

#[derive(Serialize)]
struct GenBody<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct GenReply {
    #[serde(alias = "completion")]
    text: String,
}

/// Generator backed by an HTTP endpoint: POST `{prompt, max_tokens,
/// temperature}`, reply `{"text": ...}`.
pub struct HttpGenerator {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(endpoint: impl Into<String>, timeout_ms: u64) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: agent(timeout_ms),
        }
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ClientError> {
        req.validate()?;
        let body = GenBody {
            prompt: &req.prompt,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
        };
        let reply: GenReply = post_json(&self.agent, &self.endpoint, &body)?;
        Ok(reply.text)
    }
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedReply {
    embedding: Vec<f64>,
}

/// Embedder backed by an HTTP endpoint: POST `{text}`, reply
/// `{"embedding": [...]}`. Replies are L2-normalized locally.
pub struct HttpEmbedder {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout_ms: u64) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: agent(timeout_ms),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ClientError> {
        if text.is_empty() {
            return Err(ClientError::EmptyText);
        }
        let reply: EmbedReply = post_json(&self.agent, &self.endpoint, &EmbedBody { text })?;
        EmbeddingVector::normalized(reply.embedding)
            .ok_or_else(|| ClientError::MalformedResponse("zero or non-finite embedding".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub timeout_ms: u64,
    pub embed_dim: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

pub struct Clients {
    pub generator: Box<dyn Generator>,
    pub embedder: Box<dyn Embedder>,
}

impl Clients {
    pub fn stub(cfg: &ClientConfig) -> Self {
        Self {
            generator: Box::new(StubGenerator),
            embedder: Box::new(HashingEmbedder::new(cfg.embed_dim)),
        }
    }

    /// Uses `GEN_ENDPOINT` / `EMBED_ENDPOINT` when set and `force_stub` is
    /// false; falls back to the offline clients otherwise.
    pub fn from_env(cfg: &ClientConfig, force_stub: bool) -> Self {
        let endpoint = |var| {
            (!force_stub)
                .then(|| std::env::var(var).ok())
                .flatten()
                .filter(|v| !v.trim().is_empty())
        };
        let generator: Box<dyn Generator> = match endpoint(GEN_ENDPOINT_VAR) {
            Some(url) => Box::new(HttpGenerator::new(url, cfg.timeout_ms)),
            None => Box::new(StubGenerator),
        };
        let embedder: Box<dyn Embedder> = match endpoint(EMBED_ENDPOINT_VAR) {
            Some(url) => Box::new(HttpEmbedder::new(url, cfg.timeout_ms)),
            None => Box::new(HashingEmbedder::new(cfg.embed_dim)),
        };
        Self { generator, embedder }
    }
}
