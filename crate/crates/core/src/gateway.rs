//! Chat-completion dispatch: an OpenAI-compatible HTTP client, a
//! deterministic mock student for offline runs, and bounded-concurrency
//! batching over either.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::classroom::{SkillDistribution, SkillLevel, StudentProfile};
use crate::corpus::{Corpus, Item, Letter};
use crate::promptgen::{PromptKind, RenderedPrompt};
use crate::responses::{JsonlLog, StoreError};
use crate::rng::{derive_seed, SplitMix64};

pub const API_KEY_ENV: &str = "CLASSIM_API_KEY";

/// Default sampling temperature for student role-play.
pub const ROLEPLAY_TEMPERATURE: f64 = 0.7;

#[derive(Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub timeout_secs: f64,
    /// First retry delay; doubles on each further attempt.
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint: "http://localhost:8000".into(),
            model: "mock".into(),
            temperature: ROLEPLAY_TEMPERATURE,
            max_tokens: 1024,
            max_in_flight: 8,
            max_retries: 3,
            timeout_secs: 120.0,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
            api_key: None,
        }
    }
}

impl fmt::Debug for GatewayConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GatewayConfig")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .field("max_tokens", &self.max_tokens)
            .field("max_in_flight", &self.max_in_flight)
            .field("max_retries", &self.max_retries)
            .field("timeout_secs", &self.timeout_secs)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl GatewayConfig {
    /// Pick up the bearer token from the environment.
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(GatewayError::Config("timeout must be positive".into()));
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.backoff_cap_ms);
        Duration::from_millis(ms)
    }
}

/// Identifies one request within a run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestKey {
    pub item_id: String,
    pub student_index: Option<usize>,
    pub replicate: u32,
}

impl RequestKey {
    pub fn new(item_id: impl Into<String>, student_index: Option<usize>, replicate: u32) -> Self {
        RequestKey {
            item_id: item_id.into(),
            student_index,
            replicate,
        }
    }
}

impl fmt::Display for RequestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.student_index {
            Some(s) => write!(f, "{}/student {}/rep {}", self.item_id, s, self.replicate),
            None => write!(f, "{}/rep {}", self.item_id, self.replicate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub key: RequestKey,
    pub raw: String,
    pub model: String,
    pub latency_ms: u64,
    pub attempts: u32,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure for {key} after {attempts} attempt(s): {message}")]
    Transport {
        key: RequestKey,
        attempts: u32,
        message: String,
    },
    #[error("endpoint rejected {key} with status {status:?}: {message}")]
    Protocol {
        key: RequestKey,
        status: Option<u16>,
        message: String,
    },
    #[error("request key {0} appears more than once in the batch")]
    DuplicateKey(RequestKey),
    #[error("request {0} not sent: batch aborted after an earlier failure")]
    Aborted(RequestKey),
    #[error("invalid gateway configuration: {0}")]
    Config(String),
    #[error("capture log: {0}")]
    Capture(#[from] StoreError),
}

impl GatewayError {
    pub fn key(&self) -> Option<&RequestKey> {
        match self {
            GatewayError::Transport { key, .. }
            | GatewayError::Protocol { key, .. }
            | GatewayError::DuplicateKey(key)
            | GatewayError::Aborted(key) => Some(key),
            _ => None,
        }
    }
}

/// Outcome of a single attempt at a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptError {
    /// Worth retrying: timeouts, connection failures, 408, 429 and 5xx.
    Transient { status: Option<u16>, message: String },
    /// Anything else: retrying would not help.
    Terminal { status: Option<u16>, message: String },
}

/// Statuses that are retried; everything else is final.
pub fn is_retryable_status(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

pub trait CompletionBackend: Send + Sync {
    fn model_name(&self) -> &str;

    fn attempt(&self, prompt: &RenderedPrompt, key: &RequestKey, temperature: f64) -> Result<String, AttemptError>;
}

/// OpenAI-compatible `/v1/chat/completions` client.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    max_tokens: u32,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &GatewayConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        HttpBackend {
            agent,
            url: chat_completions_url(&config.endpoint),
            model: config.model.clone(),
            max_tokens: config.max_tokens,
            api_key: config.api_key.clone(),
        }
    }
}

/// Accepts a server root, a `/v1` base, or the full completions path.
pub fn chat_completions_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_string()
    } else if base.ends_with("/v1") {
        format!("{base}/chat/completions")
    } else {
        format!("{base}/v1/chat/completions")
    }
}

/// The JSON body sent for one prompt.
pub fn chat_request_body(prompt: &RenderedPrompt, model: &str, temperature: f64, max_tokens: u32) -> serde_json::Value {
    let mut messages = Vec::new();
    if !prompt.system_text.is_empty() {
        messages.push(json!({"role": "system", "content": prompt.system_text}));
    }
    messages.push(json!({"role": "user", "content": prompt.user_text}));
    json!({
        "model": model,
        "messages": messages,
        "temperature": temperature,
        "max_tokens": max_tokens,
    })
}

/// Pull `choices[0].message.content` out of a completion response.
pub fn extract_content(body: &serde_json::Value) -> Option<String> {
    let content = body.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Null => Some(String::new()),
        _ => None,
    }
}

impl CompletionBackend for HttpBackend {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn attempt(&self, prompt: &RenderedPrompt, _key: &RequestKey, temperature: f64) -> Result<String, AttemptError> {
        let body = chat_request_body(prompt, &self.model, temperature, self.max_tokens);
        let mut req = self.agent.post(&self.url);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| AttemptError::Transient {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| AttemptError::Transient {
            status: Some(status),
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            let message = text.chars().take(500).collect();
            return Err(if is_retryable_status(status) {
                AttemptError::Transient {
                    status: Some(status),
                    message,
                }
            } else {
                AttemptError::Terminal {
                    status: Some(status),
                    message,
                }
            });
        }
        let parsed: serde_json::Value = serde_json::from_str(&text).map_err(|e| AttemptError::Terminal {
            status: Some(status),
            message: format!("response is not JSON: {e}"),
        })?;
        extract_content(&parsed).ok_or_else(|| AttemptError::Terminal {
            status: Some(status),
            message: "response has no choices[0].message.content".into(),
        })
    }
}

/// How a mock student picks among wrong answers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorPolicy {
    #[default]
    Uniform,
    /// Proportional to the real choice shares of the wrong answers; falls
    /// back to uniform when an item has no real distribution.
    RealMarginal,
}

/// How the mock answers the expert-solver prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertPolicy {
    #[default]
    AlwaysCorrect,
    UniformRandom,
    /// Answers like a student with this ability.
    Ability(f64),
}

/// How the mock answers the direct percentage prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectPolicy {
    /// Always report this percentage.
    Constant(f64),
    /// The Rasch success rate averaged over a skill mix.
    Mixture(SkillDistribution),
}

impl Default for DirectPolicy {
    fn default() -> Self {
        DirectPolicy::Mixture(SkillDistribution::default())
    }
}

/// Group abilities used by the mock unless overridden.
pub const DEFAULT_MOCK_ABILITIES: [f64; 4] = [-1.0, -0.3, 0.6, 1.3];

#[derive(Debug, Clone)]
struct MockItem {
    letters: Vec<Letter>,
    correct: Letter,
    real_wrong: Vec<(Letter, f64)>,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Difficulty whose success probability for an ability-0 student is `p`.
/// Easier items (higher `p`) get lower difficulty.
pub fn difficulty_from_rate(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (1.0 - p).ln() - p.ln()
}

/// Offline backend that answers as a Rasch-model student. Every response
/// depends only on the seed and the request key.
#[derive(Debug, Clone)]
pub struct MockStudentModel {
    name: String,
    abilities: [f64; 4],
    difficulties: BTreeMap<String, f64>,
    items: BTreeMap<String, MockItem>,
    roster: BTreeMap<usize, SkillLevel>,
    pub distractors: DistractorPolicy,
    pub expert: ExpertPolicy,
    pub direct: DirectPolicy,
    seed: u64,
}

impl MockStudentModel {
    /// Difficulties default to [`difficulty_from_rate`] of each item's real
    /// percent correct.
    pub fn from_corpus(corpus: &Corpus, seed: u64) -> Self {
        let items = corpus
            .items()
            .iter()
            .map(|it| (it.item_id.clone(), mock_item(it)))
            .collect();
        let difficulties = corpus
            .items()
            .iter()
            .map(|it| (it.item_id.clone(), difficulty_from_rate(it.real_percent_correct)))
            .collect();
        MockStudentModel {
            name: "mock".into(),
            abilities: DEFAULT_MOCK_ABILITIES,
            difficulties,
            items,
            roster: BTreeMap::new(),
            distractors: DistractorPolicy::default(),
            expert: ExpertPolicy::default(),
            direct: DirectPolicy::default(),
            seed,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_abilities(mut self, abilities: [f64; 4]) -> Self {
        self.abilities = abilities;
        self
    }

    /// Replace difficulties for the listed items.
    pub fn with_difficulties(mut self, difficulties: &BTreeMap<String, f64>) -> Self {
        for (id, d) in difficulties {
            self.difficulties.insert(id.clone(), *d);
        }
        self
    }

    pub fn with_roster(mut self, classroom: &[StudentProfile]) -> Self {
        self.roster = classroom.iter().map(|p| (p.student_index, p.skill)).collect();
        self
    }

    pub fn with_distractors(mut self, policy: DistractorPolicy) -> Self {
        self.distractors = policy;
        self
    }

    pub fn with_expert(mut self, policy: ExpertPolicy) -> Self {
        self.expert = policy;
        self
    }

    pub fn with_direct(mut self, policy: DirectPolicy) -> Self {
        self.direct = policy;
        self
    }

    pub fn abilities(&self) -> [f64; 4] {
        self.abilities
    }

    pub fn difficulty(&self, item_id: &str) -> Option<f64> {
        self.difficulties.get(item_id).copied()
    }

    pub fn difficulties(&self) -> &BTreeMap<String, f64> {
        &self.difficulties
    }

    /// Success probability of a student at `skill` on `item_id`.
    pub fn success_probability(&self, skill: SkillLevel, item_id: &str) -> Option<f64> {
        Some(logistic(self.abilities[skill.index()] - self.difficulty(item_id)?))
    }

    /// Expected success rate over a skill mix.
    pub fn mixture_rate(&self, dist: &SkillDistribution, item_id: &str) -> Option<f64> {
        let d = self.difficulty(item_id)?;
        Some(
            SkillLevel::ALL
                .iter()
                .map(|s| dist.weight(*s) * logistic(self.abilities[s.index()] - d))
                .sum(),
        )
    }

    fn answer(&self, item: &MockItem, p_correct: f64, rng: &mut SplitMix64) -> Letter {
        if rng.next_f64() < p_correct {
            return item.correct;
        }
        let wrong: Vec<Letter> = item.letters.iter().copied().filter(|l| *l != item.correct).collect();
        if wrong.is_empty() {
            return item.correct;
        }
        if self.distractors == DistractorPolicy::RealMarginal && !item.real_wrong.is_empty() {
            let weights: Vec<f64> = item.real_wrong.iter().map(|(_, w)| *w).collect();
            if let Some(i) = rng.weighted_index(&weights) {
                return item.real_wrong[i].0;
            }
        }
        wrong[rng.below(wrong.len() as u64) as usize]
    }

    fn respond(&self, prompt: &RenderedPrompt, key: &RequestKey) -> Result<String, AttemptError> {
        let terminal = |message: String| AttemptError::Terminal { status: None, message };
        let item_id = &prompt.metadata.item_id;
        let item = self
            .items
            .get(item_id)
            .ok_or_else(|| terminal(format!("mock has no item {item_id}")))?;
        let difficulty = self
            .difficulty(item_id)
            .ok_or_else(|| terminal(format!("mock has no difficulty for {item_id}")))?;
        let label = format!(
            "{}|{}|{}|{:?}",
            key.item_id,
            key.student_index.map_or(-1, |s| s as i64),
            key.replicate,
            prompt.metadata.kind
        );
        let mut rng = SplitMix64::new(derive_seed(self.seed, &label));
        match prompt.metadata.kind {
            PromptKind::StudentRolePlay => {
                let idx = prompt
                    .metadata
                    .student_index
                    .ok_or_else(|| terminal("role-play prompt without a student".into()))?;
                let skill = *self
                    .roster
                    .get(&idx)
                    .ok_or_else(|| terminal(format!("mock roster has no student {idx}")))?;
                let p = logistic(self.abilities[skill.index()] - difficulty);
                let letter = self.answer(item, p, &mut rng);
                Ok(json!({
                    "reasoning": format!("As a {} student I work through the problem.", skill.display_name()),
                    "answer key": letter.to_string(),
                })
                .to_string())
            }
            PromptKind::KnowledgeBaseline => {
                let letter = match self.expert {
                    ExpertPolicy::AlwaysCorrect => item.correct,
                    ExpertPolicy::UniformRandom => item.letters[rng.below(item.letters.len() as u64) as usize],
                    ExpertPolicy::Ability(beta) => self.answer(item, logistic(beta - difficulty), &mut rng),
                };
                Ok(format!("The answer follows from the problem.\nAnswer Key: {letter}"))
            }
            PromptKind::DirectPercentage => {
                let pct = match self.direct {
                    DirectPolicy::Constant(v) => v,
                    DirectPolicy::Mixture(dist) => 100.0 * self.mixture_rate(&dist, item_id).unwrap_or(0.5),
                };
                Ok(format!("Percentage Correct: {}", format_percent(pct)))
            }
        }
    }
}

fn format_percent(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn mock_item(item: &Item) -> MockItem {
    let real_wrong = item
        .real_choice_distribution
        .as_ref()
        .map(|d| {
            item.wrong_letters()
                .into_iter()
                .map(|l| (l, d.get(&l).copied().unwrap_or(0.0)))
                .filter(|(_, w)| *w > 0.0)
                .collect()
        })
        .unwrap_or_default();
    MockItem {
        letters: item.letters().collect(),
        correct: item.correct_key,
        real_wrong,
    }
}

impl CompletionBackend for MockStudentModel {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn attempt(&self, prompt: &RenderedPrompt, key: &RequestKey, _temperature: f64) -> Result<String, AttemptError> {
        self.respond(prompt, key)
    }
}

/// Request/response pair mirrored to the capture log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureEntry {
    pub key: RequestKey,
    pub model: String,
    pub system_text: String,
    pub user_text: String,
    pub raw: Option<String>,
    pub error: Option<String>,
    pub attempts: u32,
    pub latency_ms: u64,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub retries: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    retries: AtomicU64,
}

/// Per-key outcome of a batch, in submission order.
pub type BatchResult = Vec<(RequestKey, Result<CompletionRecord, GatewayError>)>;

#[derive(Clone)]
pub struct Gateway {
    config: GatewayConfig,
    backend: Arc<dyn CompletionBackend>,
    capture: Option<Arc<JsonlLog<CaptureEntry>>>,
    counters: Arc<Counters>,
    sleep: Arc<dyn Fn(Duration) + Send + Sync>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("model", &self.backend.model_name())
            .finish()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Gateway {
    pub fn new(config: GatewayConfig, backend: Arc<dyn CompletionBackend>) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Gateway {
            config,
            backend,
            capture: None,
            counters: Arc::default(),
            sleep: Arc::new(std::thread::sleep),
        })
    }

    pub fn http(config: GatewayConfig) -> Result<Self, GatewayError> {
        let backend = Arc::new(HttpBackend::new(&config));
        Gateway::new(config, backend)
    }

    pub fn mock(config: GatewayConfig, model: MockStudentModel) -> Result<Self, GatewayError> {
        Gateway::new(config, Arc::new(model))
    }

    /// Mirror every request and response to a JSONL file.
    pub fn with_capture(mut self, path: &Path) -> Result<Self, GatewayError> {
        let (log, _) = JsonlLog::open(path)?;
        self.capture = Some(Arc::new(log));
        Ok(self)
    }

    /// Replace the backoff sleep, e.g. to keep tests fast.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    /// Same backend and counters at another temperature.
    pub fn with_temperature(&self, temperature: f64) -> Self {
        let mut g = self.clone();
        g.config.temperature = temperature;
        g
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn model_name(&self) -> &str {
        self.backend.model_name()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.counters.requests.load(Ordering::Relaxed),
            retries: self.counters.retries.load(Ordering::Relaxed),
        }
    }

    /// Send one prompt, retrying transient failures with exponential backoff.
    pub fn complete(&self, prompt: &RenderedPrompt, key: &RequestKey) -> Result<CompletionRecord, GatewayError> {
        let start = Instant::now();
        let mut attempts = 0u32;
        let outcome = loop {
            attempts += 1;
            self.counters.requests.fetch_add(1, Ordering::Relaxed);
            match self.backend.attempt(prompt, key, self.config.temperature) {
                Ok(raw) => break Ok(raw),
                Err(AttemptError::Terminal { status, message }) => {
                    break Err(GatewayError::Protocol {
                        key: key.clone(),
                        status,
                        message,
                    })
                }
                Err(AttemptError::Transient { status, message }) => {
                    if attempts > self.config.max_retries {
                        let message = match status {
                            Some(s) => format!("status {s}: {message}"),
                            None => message,
                        };
                        break Err(GatewayError::Transport {
                            key: key.clone(),
                            attempts,
                            message,
                        });
                    }
                    self.counters.retries.fetch_add(1, Ordering::Relaxed);
                    (self.sleep)(self.config.backoff(attempts - 1));
                }
            }
        };
        let latency_ms = start.elapsed().as_millis() as u64;
        let timestamp_ms = now_ms();
        if let Some(log) = &self.capture {
            log.append(&[CaptureEntry {
                key: key.clone(),
                model: self.model_name().to_string(),
                system_text: prompt.system_text.clone(),
                user_text: prompt.user_text.clone(),
                raw: outcome.as_ref().ok().cloned(),
                error: outcome.as_ref().err().map(|e| e.to_string()),
                attempts,
                latency_ms,
                timestamp_ms,
            }])?;
        }
        outcome.map(|raw| CompletionRecord {
            key: key.clone(),
            raw,
            model: self.model_name().to_string(),
            latency_ms,
            attempts,
            timestamp_ms,
        })
    }

    /// Run a batch with at most `max_in_flight` requests outstanding.
    /// Failures are reported per key; with `fail_fast`, requests not yet
    /// started after the first failure come back as [`GatewayError::Aborted`].
    pub fn complete_batch(
        &self,
        prompts: &[(RequestKey, RenderedPrompt)],
        fail_fast: bool,
    ) -> Result<BatchResult, GatewayError> {
        let mut seen = HashSet::with_capacity(prompts.len());
        for (key, _) in prompts {
            if !seen.insert(key) {
                return Err(GatewayError::DuplicateKey(key.clone()));
            }
        }
        let slots: Vec<Mutex<Option<Result<CompletionRecord, GatewayError>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = self.config.max_in_flight.min(prompts.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((key, prompt)) = prompts.get(i) else {
                        break;
                    };
                    let result = if fail_fast && abort.load(Ordering::SeqCst) {
                        Err(GatewayError::Aborted(key.clone()))
                    } else {
                        let r = self.complete(prompt, key);
                        if r.is_err() {
                            abort.store(true, Ordering::SeqCst);
                        }
                        r
                    };
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        Ok(prompts
            .iter()
            .zip(slots)
            .map(|((key, _), slot)| {
                let result = slot.into_inner().expect("slot lock").expect("every slot filled");
                (key.clone(), result)
            })
            .collect())
    }
}
