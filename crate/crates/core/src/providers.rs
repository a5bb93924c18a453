//! Client boundary for the neural services: text embedding, image embedding
//! and caption generation.
//!
//! The HTTP wire contract is JSON:
//!
//! * `POST /v1/embed_text` `{"texts": [...]}` -> `{"dim": N, "vectors": [[...]]}`
//! * `POST /v1/embed_image` `{"image": "<base64>", "format": "png"}` -> `{"dim": N, "vector": [...]}`
//! * `POST /v1/caption` `{"prompt": "...", "max_words": 350}` -> `{"text": "..."}`
//!
//! A bearer token is read from the configured environment variable on every
//! call. No call is retried here.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CAPTION_MIN_WORDS: usize = 300;
pub const CAPTION_MAX_WORDS: usize = 350;
const BODY_EXCERPT_CHARS: usize = 200;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("request to {endpoint} timed out after {timeout_ms} ms")]
    Timeout { endpoint: String, timeout_ms: u64 },
    #[error("{endpoint} returned status {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("malformed response from {endpoint}: {message}")]
    Decode { endpoint: String, message: String },
    #[error("expected {expected} vectors, got {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("mock fixture: {0}")]
    Fixture(String),
}

pub trait TextEmbedder: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

pub trait ImageEmbedder: Send + Sync {
    fn embed_image(&self, image: &[u8], format_hint: &str) -> Result<Vec<f32>, ProviderError>;
}

pub trait CaptionGenerator: Send + Sync {
    fn generate_caption(
        &self,
        prompt: &str,
        max_words: usize,
    ) -> Result<GeneratedCaption, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthAdvisory {
    TooShort,
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub text: String,
    pub word_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub advisory: Option<LengthAdvisory>,
}

impl GeneratedCaption {
    pub fn new(text: String) -> Self {
        let word_count = text.split_whitespace().count();
        let advisory = if word_count < CAPTION_MIN_WORDS {
            Some(LengthAdvisory::TooShort)
        } else if word_count > CAPTION_MAX_WORDS {
            Some(LengthAdvisory::TooLong)
        } else {
            None
        };
        GeneratedCaption {
            text,
            word_count,
            advisory,
        }
    }
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// Base URL; endpoint paths are appended.
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hint: Option<String>,
}

impl ProviderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ProviderConfig {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            auth_token_env: None,
            model_hint: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.timeout_ms == 0 {
            return Err(ProviderError::InvalidInput("timeout_ms must be positive".into()));
        }
        let uri: Result<ureq::http::Uri, _> = self.endpoint.parse();
        match uri {
            Ok(u) if u.scheme().is_some() && u.host().is_some() => Ok(()),
            _ => Err(ProviderError::InvalidInput(format!(
                "endpoint `{}` is not an absolute URL",
                self.endpoint
            ))),
        }
    }
}

#[derive(Serialize)]
struct EmbedTextRequest<'a> {
    texts: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct EmbedTextResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

#[derive(Serialize)]
struct EmbedImageRequest<'a> {
    image: String,
    format: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct EmbedImageResponse {
    dim: usize,
    vector: Vec<f32>,
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    prompt: &'a str,
    max_words: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct CaptionResponse {
    text: String,
}

/// Blocking JSON-over-HTTP provider. Cheap to share across threads.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    config: ProviderConfig,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpProvider { config, agent })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn token(&self) -> Option<String> {
        self.config
            .auth_token_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty())
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let url = self.url(path);
        let token = self.token();
        let redact = |s: String| match &token {
            Some(t) => s.replace(t.as_str(), "[redacted]"),
            None => s,
        };
        let mut req = self.agent.post(&url);
        if let Some(t) = &token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout {
                endpoint: url.clone(),
                timeout_ms: self.config.timeout_ms,
            },
            other => ProviderError::Transport {
                endpoint: url.clone(),
                message: redact(other.to_string()),
            },
        };
        let mut resp = req.send_json(body).map_err(map_err)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_err)?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status {
                endpoint: url.clone(),
                status,
                body: redact(text.chars().take(BODY_EXCERPT_CHARS).collect()),
            });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Decode {
            endpoint: url.clone(),
            message: e.to_string(),
        })
    }
}

fn check_dims(vectors: &[Vec<f32>], dim: usize) -> Result<(), ProviderError> {
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(ProviderError::DimensionMismatch {
                index,
                expected: dim,
                found: v.len(),
            });
        }
    }
    Ok(())
}

impl TextEmbedder for HttpProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidInput("no texts to embed".into()));
        }
        let resp: EmbedTextResponse = self.post(
            "/v1/embed_text",
            &EmbedTextRequest {
                texts,
                model: self.config.model_hint.as_deref(),
            },
        )?;
        if resp.vectors.len() != texts.len() {
            return Err(ProviderError::CountMismatch {
                expected: texts.len(),
                found: resp.vectors.len(),
            });
        }
        check_dims(&resp.vectors, resp.dim)?;
        Ok(resp.vectors)
    }
}

impl ImageEmbedder for HttpProvider {
    fn embed_image(&self, image: &[u8], format_hint: &str) -> Result<Vec<f32>, ProviderError> {
        if image.is_empty() {
            return Err(ProviderError::InvalidInput("empty image".into()));
        }
        let resp: EmbedImageResponse = self.post(
            "/v1/embed_image",
            &EmbedImageRequest {
                image: base64::engine::general_purpose::STANDARD.encode(image),
                format: format_hint,
                model: self.config.model_hint.as_deref(),
            },
        )?;
        check_dims(std::slice::from_ref(&resp.vector), resp.dim)?;
        Ok(resp.vector)
    }
}

impl CaptionGenerator for HttpProvider {
    fn generate_caption(
        &self,
        prompt: &str,
        max_words: usize,
    ) -> Result<GeneratedCaption, ProviderError> {
        if prompt.trim().is_empty() {
            return Err(ProviderError::InvalidInput("empty prompt".into()));
        }
        let resp: CaptionResponse = self.post(
            "/v1/caption",
            &CaptionRequest {
                prompt,
                max_words,
                model: self.config.model_hint.as_deref(),
            },
        )?;
        Ok(GeneratedCaption::new(resp.text))
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fixed outputs keyed by the SHA-256 (hex) of the input. The `*_literals`
/// maps are keyed by the raw text and hashed at load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSpec {
    pub dimension: usize,
    pub texts: BTreeMap<String, Vec<f32>>,
    pub text_literals: BTreeMap<String, Vec<f32>>,
    pub images: BTreeMap<String, Vec<f32>>,
    pub captions: BTreeMap<String, String>,
}

/// Deterministic in-process provider.
///
/// Unmapped texts embed as a signed hashed bag of lowercase word tokens, so
/// texts sharing vocabulary score higher cosine similarity. Unmapped images
/// embed as a pseudo-random vector seeded from their hash. Unmapped prompts
/// caption as their last non-empty line (the base caption, in the bundled
/// template).
#[derive(Debug, Clone)]
pub struct MockProvider {
    dimension: usize,
    texts: BTreeMap<String, Vec<f32>>,
    images: BTreeMap<String, Vec<f32>>,
    captions: BTreeMap<String, String>,
}

impl MockProvider {
    pub fn new(spec: MockSpec) -> Result<Self, ProviderError> {
        if spec.dimension == 0 {
            return Err(ProviderError::Fixture("dimension must be positive".into()));
        }
        let mut texts = spec.texts;
        for (text, v) in spec.text_literals {
            texts.insert(content_hash(text.as_bytes()), v);
        }
        for (key, v) in texts.iter().chain(spec.images.iter()) {
            if v.len() != spec.dimension {
                return Err(ProviderError::Fixture(format!(
                    "vector for `{key}` has dimension {}, expected {}",
                    v.len(),
                    spec.dimension
                )));
            }
        }
        Ok(MockProvider {
            dimension: spec.dimension,
            texts,
            images: spec.images,
            captions: spec.captions,
        })
    }

    pub fn with_dimension(dimension: usize) -> Self {
        Self::new(MockSpec {
            dimension: dimension.max(1),
            ..MockSpec::default()
        })
        .expect("empty spec is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Fixture(format!("{}: {e}", path.display())))?;
        let spec: MockSpec = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Fixture(format!("{}: {e}", path.display())))?;
        Self::new(spec)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn bag_of_words(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dimension];
        let lower = text.to_lowercase();
        let mut any = false;
        for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let h = Sha256::digest(tok.as_bytes());
            let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % self.dimension;
            v[idx] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            any = true;
        }
        if !any || v.iter().all(|&x| x == 0.0) {
            let h = Sha256::digest(text.as_bytes());
            let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % self.dimension;
            v[idx] = 1.0;
        }
        v
    }
}

impl TextEmbedder for MockProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidInput("no texts to embed".into()));
        }
        Ok(texts
            .iter()
            .map(|t| {
                self.texts
                    .get(&content_hash(t.as_bytes()))
                    .cloned()
                    .unwrap_or_else(|| self.bag_of_words(t))
            })
            .collect())
    }
}

impl ImageEmbedder for MockProvider {
    fn embed_image(&self, image: &[u8], _format_hint: &str) -> Result<Vec<f32>, ProviderError> {
        if image.is_empty() {
            return Err(ProviderError::InvalidInput("empty image".into()));
        }
        let key = content_hash(image);
        if let Some(v) = self.images.get(&key) {
            return Ok(v.clone());
        }
        let seed = Sha256::digest(image);
        let mut rng = ChaCha8Rng::from_seed(seed.into());
        Ok((0..self.dimension).map(|_| rng.random_range(-1.0..1.0f32)).collect())
    }
}

impl CaptionGenerator for MockProvider {
    fn generate_caption(
        &self,
        prompt: &str,
        _max_words: usize,
    ) -> Result<GeneratedCaption, ProviderError> {
        if prompt.trim().is_empty() {
            return Err(ProviderError::InvalidInput("empty prompt".into()));
        }
        if let Some(text) = self.captions.get(&content_hash(prompt.as_bytes())) {
            return Ok(GeneratedCaption::new(text.clone()));
        }
        let last = prompt
            .lines()
            .rev()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .unwrap_or_default();
        Ok(GeneratedCaption::new(last.to_string()))
    }
}
