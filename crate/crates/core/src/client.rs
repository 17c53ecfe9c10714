//! Vision-language chat completion backends.
//!
//! Two backends sit behind [`ChatBackend`]: an OpenAI-compatible HTTP client
//! that inlines images as base64 PNG data URLs, and a scripted mock that
//! replays canned responses from a scenario file. [`Client`] adds an optional
//! on-disk response cache keyed by [`fingerprint`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pyramid::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Stage1,
    Stage2,
    Stage3,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::Stage3 => "stage3",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Routing hints for the mock backend. Not part of the fingerprint and never
/// sent over the wire.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestContext {
    pub drawing_id: Option<String>,
    pub region_label: Option<String>,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub images: Vec<RasterImage>,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stage_tag: StageTag,
    pub context: RequestContext,
}

impl ChatRequest {
    pub fn new(stage_tag: StageTag, prompt: impl Into<String>, images: Vec<RasterImage>) -> Self {
        ChatRequest {
            images,
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            stage_tag,
            context: RequestContext::default(),
        }
    }

    pub fn with_context(mut self, drawing_id: Option<&str>, region_label: Option<&str>) -> Self {
        self.context = RequestContext {
            drawing_id: drawing_id.map(str::to_owned),
            region_label: region_label.map(str::to_owned),
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.images.is_empty() && self.stage_tag != StageTag::Stage3 {
            return Err(Error::InvalidRequest(format!("{} requires at least one image", self.stage_tag)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    pub backend_id: String,
    pub from_cache: bool,
}

/// Stable digest over everything that determines a completion: stage, prompt
/// bytes, sampling parameters, and the decoded pixels of each image.
pub fn fingerprint(req: &ChatRequest) -> String {
    let mut h = Sha256::new();
    h.update(b"gridlens-request-v1\0");
    h.update(req.stage_tag.as_str().as_bytes());
    h.update([0u8]);
    h.update((req.prompt.len() as u64).to_le_bytes());
    h.update(req.prompt.as_bytes());
    h.update(req.temperature.to_bits().to_le_bytes());
    h.update(req.max_tokens.to_le_bytes());
    h.update((req.images.len() as u64).to_le_bytes());
    for img in &req.images {
        h.update(img.content_digest().as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on each subsequent retry.
    pub retry_backoff_ms: u64,
    pub scenario_path: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    /// Upper bound on the combined encoded image payload of one request.
    pub payload_limit_bytes: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint_url: String::new(),
            model_name: String::new(),
            auth_token_env: "GRIDLENS_API_KEY".into(),
            timeout_secs: 120,
            max_retries: 2,
            retry_backoff_ms: 1000,
            scenario_path: None,
            cache_dir: None,
            payload_limit_bytes: 20_000_000,
        }
    }
}

impl BackendConfig {
    pub fn mock(scenario_path: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            scenario_path: Some(scenario_path.into()),
            ..Default::default()
        }
    }

    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackendKind::Http if self.endpoint_url.is_empty() || self.model_name.is_empty() => Err(
                Error::Config("http backend requires endpoint_url and model_name".into()),
            ),
            BackendKind::Mock if self.scenario_path.is_none() => {
                Err(Error::Config("mock backend requires scenario_path".into()))
            }
            _ => Ok(()),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> String;
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse>;
}

// ---------------------------------------------------------------------------
// Mock backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedResponse {
    pub raw_text: String,
    #[serde(default)]
    pub latency_ms: u64,
}

/// Response used when no exact fingerprint is scripted. `None` fields match
/// any request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackResponse {
    pub stage: StageTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drawing_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_label: Option<String>,
    pub raw_text: String,
    #[serde(default)]
    pub latency_ms: u64,
}

/// Scripted responses for the mock backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub responses: BTreeMap<String, CannedResponse>,
    #[serde(default)]
    pub fallbacks: Vec<FallbackResponse>,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Exact fingerprint first; otherwise the most specific matching fallback
    /// (drawing match outranks label match), earliest entry on ties.
    pub fn lookup(&self, fp: &str, req: &ChatRequest) -> Option<CannedResponse> {
        if let Some(r) = self.responses.get(fp) {
            return Some(r.clone());
        }
        let mut best: Option<(u8, &FallbackResponse)> = None;
        for f in self.fallbacks.iter().filter(|f| f.stage == req.stage_tag) {
            let mut score = 0u8;
            match (&f.drawing_id, &req.context.drawing_id) {
                (None, _) => {}
                (Some(a), Some(b)) if a == b => score += 2,
                _ => continue,
            }
            match (&f.region_label, &req.context.region_label) {
                (None, _) => {}
                (Some(a), Some(b)) if a.trim() == b.trim() => score += 1,
                _ => continue,
            }
            if best.map_or(true, |(s, _)| score > s) {
                best = Some((score, f));
            }
        }
        best.map(|(_, f)| CannedResponse {
            raw_text: f.raw_text.clone(),
            latency_ms: f.latency_ms,
        })
    }
}

pub struct MockBackend {
    scenario: Scenario,
}

impl MockBackend {
    pub fn new(scenario: Scenario) -> Self {
        MockBackend { scenario }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(MockBackend::new(Scenario::load(path)?))
    }
}

impl ChatBackend for MockBackend {
    fn backend_id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let fp = fingerprint(req);
        match self.scenario.lookup(&fp, req) {
            Some(r) => Ok(ChatResponse {
                raw_text: r.raw_text,
                latency_ms: r.latency_ms,
                backend_id: self.backend_id(),
                from_cache: false,
            }),
            None => Err(Error::MockMiss {
                fingerprint: fp,
                stage: req.stage_tag,
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP backend

pub struct HttpBackend {
    cfg: BackendConfig,
    http: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpBackend { cfg, http })
    }

    /// Body of a `/chat/completions` call: one user message with a text part
    /// followed by one `image_url` part per image.
    pub fn request_body(&self, req: &ChatRequest) -> Result<serde_json::Value> {
        let mut content = vec![serde_json::json!({"type": "text", "text": req.prompt})];
        let mut payload = 0usize;
        for img in &req.images {
            let encoded = base64::engine::general_purpose::STANDARD.encode(img.encode_png()?);
            payload += encoded.len();
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{encoded}")}
            }));
        }
        if payload > self.cfg.payload_limit_bytes {
            return Err(Error::InvalidRequest(format!(
                "image payload {payload} bytes exceeds limit {}",
                self.cfg.payload_limit_bytes
            )));
        }
        Ok(serde_json::json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": content}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }))
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.endpoint_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, AttemptError> {
        let mut rb = self.http.post(self.endpoint()).json(body);
        if !self.cfg.auth_token_env.is_empty() {
            match std::env::var(&self.cfg.auth_token_env) {
                Ok(token) if !token.is_empty() => rb = rb.bearer_auth(token),
                _ => log::warn!("auth token variable {} is not set", self.cfg.auth_token_env),
            }
        }
        let resp = rb.send().map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| AttemptError::Transient(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(AttemptError::Transient(format!("HTTP {status}: {}", excerpt(&text))));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(format!("HTTP {status}: {}", excerpt(&text))));
        }
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| AttemptError::Fatal(format!("bad response JSON: {e}")))?;
        let content = extract_content(&v)
            .ok_or_else(|| AttemptError::Fatal("response has no choices[0].message.content".into()))?;
        if content.is_empty() {
            return Err(AttemptError::Fatal("empty completion".into()));
        }
        Ok(content)
    }
}

enum AttemptError {
    Transient(String),
    Fatal(String),
}

fn excerpt(s: &str) -> String {
    s.chars().take(200).collect()
}

fn extract_content(v: &serde_json::Value) -> Option<String> {
    let content = v.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

impl ChatBackend for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http:{}", self.cfg.model_name)
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let body = self.request_body(req)?;
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let delay = self.cfg.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&body) {
                Ok(raw_text) => {
                    return Ok(ChatResponse {
                        raw_text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        backend_id: self.backend_id(),
                        from_cache: false,
                    })
                }
                Err(AttemptError::Fatal(msg)) => return Err(Error::FatalBackend(msg)),
                Err(AttemptError::Transient(msg)) => {
                    log::warn!("{} attempt {} failed: {msg}", req.stage_tag, attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::RetryableBackend(last))
    }
}

// ---------------------------------------------------------------------------
// Cache + client

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    raw_text: String,
    latency_ms: u64,
    backend_id: String,
}

/// `{dir}/{digest}.json` files written via temp-file + rename.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<ChatResponse> {
        let text = std::fs::read_to_string(self.path(digest)).ok()?;
        let e: CacheEntry = serde_json::from_str(&text).ok()?;
        Some(ChatResponse {
            raw_text: e.raw_text,
            latency_ms: e.latency_ms,
            backend_id: e.backend_id,
            from_cache: true,
        })
    }

    pub fn put(&self, digest: &str, resp: &ChatResponse) -> Result<()> {
        let entry = CacheEntry {
            raw_text: resp.raw_text.clone(),
            latency_ms: resp.latency_ms,
            backend_id: resp.backend_id.clone(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        tmp.write_all(serde_json::to_string(&entry)?.as_bytes())
            .map_err(|e| Error::io(tmp.path(), e))?;
        let target = self.path(digest);
        tmp.persist(&target).map_err(|e| Error::io(&target, e.error))?;
        Ok(())
    }

    /// Number of entries and their total size in bytes.
    pub fn stats(&self) -> Result<(usize, u64)> {
        let mut n = 0;
        let mut bytes = 0;
        for entry in std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            if entry.path().extension().is_some_and(|x| x == "json") {
                n += 1;
                bytes += entry.metadata().map(|m| m.len()).unwrap_or(0);
            }
        }
        Ok((n, bytes))
    }

    pub fn clear(&self) -> Result<usize> {
        let mut removed = 0;
        for entry in std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

/// A backend plus optional response cache.
pub struct Client {
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    payload_limit_bytes: usize,
}

impl Client {
    pub fn new(backend: Box<dyn ChatBackend>, cache: Option<ResponseCache>) -> Self {
        Client {
            backend,
            cache,
            payload_limit_bytes: BackendConfig::default().payload_limit_bytes,
        }
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        cfg.validate()?;
        let backend: Box<dyn ChatBackend> = match cfg.kind {
            BackendKind::Http => Box::new(HttpBackend::new(cfg.clone())?),
            BackendKind::Mock => Box::new(MockBackend::from_file(
                cfg.scenario_path.as_ref().expect("validated"),
            )?),
        };
        let cache = cfg.cache_dir.as_ref().map(ResponseCache::new).transpose()?;
        Ok(Client {
            backend,
            cache,
            payload_limit_bytes: cfg.payload_limit_bytes,
        })
    }

    pub fn backend_id(&self) -> String {
        self.backend.backend_id()
    }

    pub fn payload_limit_bytes(&self) -> usize {
        self.payload_limit_bytes
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let digest = fingerprint(req);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&digest)) {
            return Ok(hit);
        }
        let resp = self.backend.complete(req)?;
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(&digest, &resp) {
                log::warn!("cache write failed: {e}");
            }
        }
        Ok(resp)
    }
}

/// A parsed answer and the backend latency spent obtaining it.
#[derive(Debug, Clone)]
pub struct Asked<T> {
    pub value: T,
    pub warnings: Vec<String>,
    pub latency_ms: u64,
    pub attempts: u32,
}

impl Client {
    /// Sends `req` and parses the answer, re-asking up to `max_retries` times
    /// with a correction note when the answer cannot be parsed. Backend errors
    /// are returned immediately; the last parse error is returned when all
    /// attempts fail.
    pub fn ask_structured<T>(
        &self,
        req: &ChatRequest,
        max_retries: u32,
        parse: impl Fn(&str) -> Result<crate::prompts::Parsed<T>>,
    ) -> Result<Asked<T>> {
        let mut latency_ms = 0;
        let mut attempt_req = req.clone();
        let mut attempt = 0;
        loop {
            let resp = self.complete(&attempt_req)?;
            latency_ms += resp.latency_ms;
            match parse(&resp.raw_text) {
                Ok(p) => {
                    return Ok(Asked {
                        value: p.value,
                        warnings: p.warnings,
                        latency_ms,
                        attempts: attempt + 1,
                    })
                }
                Err(e) if attempt < max_retries => {
                    log::warn!("{} answer unusable ({e}); re-asking", req.stage_tag);
                    attempt += 1;
                    attempt_req.prompt = format!(
                        "{}\n\nYour previous answer could not be used: {e}. Reply again with only the JSON value described above.",
                        req.prompt
                    );
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// One-shot completion with a client built from `cfg`.
pub fn complete(req: &ChatRequest, cfg: &BackendConfig) -> Result<ChatResponse> {
    Client::from_config(cfg)?.complete(req)
}
