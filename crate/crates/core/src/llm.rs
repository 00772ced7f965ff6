//! LLM mediation: prompt rendering, response grammars, strict record/replay
//! fixtures, text-label embeddings and token cost accounting.
//!
//! Every prompt goes through an [`LlmClient`]. Three implementations ship:
//! [`HttpClient`] talks to an OpenAI-compatible chat-completion endpoint,
//! [`RecordingClient`] wraps any client and appends each exchange to a
//! [`FixtureStore`], and [`ReplayClient`] serves responses from the store and
//! never touches the network.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ItemCatalog;
use crate::error::{Error, Result};

pub const UNKNOWN_LABEL: &str = "unknown";
pub const DEFAULT_MAX_ANGLES: usize = 6;
pub const DEFAULT_RETRIES: usize = 2;

static NETWORK_OPERATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of outbound requests issued by [`HttpClient`] in this process.
pub fn network_operations() -> usize {
    NETWORK_OPERATIONS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptPurpose {
    AngleExtraction,
    Categorization,
}

impl PromptPurpose {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptPurpose::AngleExtraction => "angle_extraction",
            PromptPurpose::Categorization => "categorization",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRequest {
    pub purpose: PromptPurpose,
    pub rendered_text: String,
    pub user_id: String,
    pub angle: Option<String>,
    pub model_id: String,
}

impl PromptRequest {
    pub fn fixture_key(&self) -> String {
        fixture_key(self.purpose, &self.model_id, &self.rendered_text)
    }
}

/// SHA-256 over purpose, model and prompt, separated by NUL bytes.
pub fn fixture_key(purpose: PromptPurpose, model_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(purpose.as_str().as_bytes());
    h.update([0u8]);
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: i64,
    pub completion_tokens: i64,
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmResponse {
    pub text: String,
    pub usage: TokenUsage,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &PromptRequest) -> Result<LlmResponse>;
}

impl<C: LlmClient + ?Sized> LlmClient for &C {
    fn complete(&self, request: &PromptRequest) -> Result<LlmResponse> {
        (**self).complete(request)
    }
}

// ---------------------------------------------------------------------------
// Fixture store

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    pub purpose: PromptPurpose,
    pub model_id: String,
    pub prompt: String,
    pub response: String,
    pub prompt_tokens: i64,
    pub completion_tokens: i64,
}

/// Append-only JSON-lines file of recorded exchanges. When a key appears more
/// than once the last record wins.
pub struct FixtureStore {
    path: PathBuf,
    records: RwLock<HashMap<String, FixtureRecord>>,
    writer: Mutex<Option<File>>,
}

impl FixtureStore {
    /// Opens an existing store read-only; fails if the file is missing.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let records = Self::load(&path)?;
        Ok(Self {
            path,
            records: RwLock::new(records),
            writer: Mutex::new(None),
        })
    }

    /// Opens (or creates) a store for appending.
    pub fn open_for_append(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let records = if path.exists() {
            Self::load(&path)?
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            records: RwLock::new(records),
            writer: Mutex::new(Some(file)),
        })
    }

    fn load(path: &Path) -> Result<HashMap<String, FixtureRecord>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.insert(rec.key.clone(), rec);
        }
        Ok(records)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<FixtureRecord> {
        self.records.read().expect("fixture lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("fixture lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&self, record: FixtureRecord) -> Result<()> {
        let line = serde_json::to_string(&record).expect("fixture record serializes");
        let mut writer = self.writer.lock().expect("fixture writer lock");
        let file = writer.as_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("fixture store {} is read-only", self.path.display()))
        })?;
        writeln!(file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.records
            .write()
            .expect("fixture lock")
            .insert(record.key.clone(), record);
        Ok(())
    }
}

/// Serves recorded responses only. A missing key is a hard error.
pub struct ReplayClient<'a> {
    store: &'a FixtureStore,
}

impl<'a> ReplayClient<'a> {
    pub fn new(store: &'a FixtureStore) -> Self {
        Self { store }
    }
}

impl LlmClient for ReplayClient<'_> {
    fn complete(&self, request: &PromptRequest) -> Result<LlmResponse> {
        let key = request.fixture_key();
        let rec = self.store.get(&key).ok_or(Error::FixtureMiss { key })?;
        Ok(LlmResponse {
            text: rec.response,
            usage: TokenUsage {
                prompt_tokens: rec.prompt_tokens,
                completion_tokens: rec.completion_tokens,
            },
        })
    }
}

/// Forwards to an inner client and appends every exchange to the store.
pub struct RecordingClient<'a, C: LlmClient> {
    inner: C,
    store: &'a FixtureStore,
}

impl<'a, C: LlmClient> RecordingClient<'a, C> {
    pub fn new(inner: C, store: &'a FixtureStore) -> Self {
        Self { inner, store }
    }
}

impl<C: LlmClient> LlmClient for RecordingClient<'_, C> {
    fn complete(&self, request: &PromptRequest) -> Result<LlmResponse> {
        let resp = self.inner.complete(request)?;
        self.store.append(FixtureRecord {
            key: request.fixture_key(),
            purpose: request.purpose,
            model_id: request.model_id.clone(),
            prompt: request.rendered_text.clone(),
            response: resp.text.clone(),
            prompt_tokens: resp.usage.prompt_tokens,
            completion_tokens: resp.usage.completion_tokens,
        })?;
        Ok(resp)
    }
}

/// Chat-completion client for an OpenAI-compatible endpoint.
pub struct HttpClient {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub const ENV_BASE: &'static str = "LLMHG_API_BASE";
    pub const ENV_KEY: &'static str = "LLMHG_API_KEY";

    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key: api_key.into(),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    pub fn from_env(timeout: Duration) -> Result<Self> {
        let base = std::env::var(Self::ENV_BASE)
            .map_err(|_| Error::InvalidConfig(format!("{} is not set", Self::ENV_BASE)))?;
        let key = std::env::var(Self::ENV_KEY)
            .map_err(|_| Error::InvalidConfig(format!("{} is not set", Self::ENV_KEY)))?;
        Ok(Self::new(base, key, timeout))
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: i64,
    completion_tokens: i64,
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &PromptRequest) -> Result<LlmResponse> {
        NETWORK_OPERATIONS.fetch_add(1, Ordering::SeqCst);
        let body = serde_json::json!({
            "model": request.model_id,
            "temperature": 0,
            "messages": [{ "role": "user", "content": request.rendered_text }],
        });
        let mut resp = self
            .agent
            .post(format!("{}/chat/completions", self.base_url))
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| Error::LlmTransport(e.to_string()))?;
        let parsed: ChatCompletion = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::LlmTransport(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::LlmTransport("response has no choices".into()))?;
        let usage = parsed
            .usage
            .map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(LlmResponse { text, usage })
    }
}

// ---------------------------------------------------------------------------
// Prompts

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    /// Placeholders: `{history}`, `{max_angles}`.
    pub angle_extraction: String,
    /// Placeholders: `{angle}`, `{items}`.
    pub categorization: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            angle_extraction: "Here is a user's viewing history, oldest first:\n\
                {history}\n\
                List at most {max_angles} interest angles (facets such as genre, director, \
                era or country) that best explain this user's preferences. \
                Answer with a numbered list, one angle per line, angle name only."
                .to_owned(),
            categorization: "Classify each of the following items by its {angle}.\n\
                {items}\n\
                Answer with one line per item in the form `item -> label, label`, \
                using the item name exactly as given. An item may have several labels."
                .to_owned(),
        }
    }
}

impl PromptTemplates {
    pub fn from_files(angle_path: &Path, categorization_path: &Path) -> Result<Self> {
        Ok(Self {
            angle_extraction: fs::read_to_string(angle_path).map_err(|e| Error::io(angle_path, e))?,
            categorization: fs::read_to_string(categorization_path)
                .map_err(|e| Error::io(categorization_path, e))?,
        })
    }
}

fn render(template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = template.to_owned();
    for (name, value) in vars {
        let placeholder = format!("{{{name}}}");
        if !out.contains(&placeholder) {
            return Err(Error::InvalidConfig(format!("template lacks placeholder {placeholder}")));
        }
        out = out.replace(&placeholder, value);
    }
    if out.trim().is_empty() {
        return Err(Error::InvalidConfig("rendered prompt is empty".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ProfilerConfig {
    pub model_id: String,
    pub max_angles: usize,
    pub retries: usize,
    pub templates: PromptTemplates,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        Self {
            model_id: "gpt-3.5-turbo".to_owned(),
            max_angles: DEFAULT_MAX_ANGLES,
            retries: DEFAULT_RETRIES,
            templates: PromptTemplates::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Response grammars

/// Lowercases, collapses whitespace and trims quotes and stray punctuation.
/// Idempotent.
pub fn normalize_label(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_whitespace() || "\"'`*.:;_".contains(c))
        .to_owned()
}

fn strip_list_marker(line: &str) -> Option<&str> {
    let line = line.trim();
    for marker in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(marker) {
            return Some(rest);
        }
    }
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(rest);
        }
    }
    None
}

/// Parses a numbered or dashed list of angle names. Text after a colon on an
/// item line is treated as commentary.
pub fn parse_angle_list(text: &str, max_angles: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut angles = Vec::new();
    for line in text.lines() {
        let Some(rest) = strip_list_marker(line) else {
            continue;
        };
        let name = normalize_label(rest.split(':').next().unwrap_or_default());
        if !name.is_empty() && seen.insert(name.clone()) {
            angles.push(name);
        }
        if angles.len() == max_angles {
            break;
        }
    }
    angles
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterestAngleSet {
    pub user_id: String,
    pub angles: Vec<String>,
}

/// Per-angle category labels for each item, in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryAssignment {
    pub angle: String,
    pub labels: Vec<(usize, Vec<String>)>,
}

impl CategoryAssignment {
    pub fn labels_of(&self, item: usize) -> Option<&[String]> {
        self.labels
            .iter()
            .find(|(i, _)| *i == item)
            .map(|(_, l)| l.as_slice())
    }
}

/// Parses `item -> label[, label]*` lines. Items are matched by title or id,
/// case-insensitively; anything not mentioned maps to `unknown`.
pub fn parse_categorization(
    text: &str,
    angle: &str,
    items: &[usize],
    catalog: &ItemCatalog,
) -> CategoryAssignment {
    let mut by_name: HashMap<String, usize> = HashMap::new();
    for &i in items {
        let item = catalog.get(i);
        by_name.entry(normalize_label(&item.title)).or_insert(i);
        by_name.entry(normalize_label(&item.id)).or_insert(i);
    }
    let mut found: HashMap<usize, Vec<String>> = HashMap::new();
    for line in text.lines() {
        let Some((lhs, rhs)) = line.rsplit_once("->") else {
            continue;
        };
        let lhs = strip_list_marker(lhs).unwrap_or(lhs);
        let Some(&item) = by_name.get(&normalize_label(lhs)) else {
            continue;
        };
        let entry = found.entry(item).or_default();
        for label in rhs.split(',').map(normalize_label) {
            if !label.is_empty() && !entry.contains(&label) {
                entry.push(label);
            }
        }
    }
    let labels = items
        .iter()
        .map(|&i| {
            let l = found.remove(&i).filter(|l| !l.is_empty());
            (i, l.unwrap_or_else(|| vec![UNKNOWN_LABEL.to_owned()]))
        })
        .collect();
    CategoryAssignment {
        angle: angle.to_owned(),
        labels,
    }
}

fn with_retries<T>(
    client: &dyn LlmClient,
    request: &PromptRequest,
    retries: usize,
    mut parse: impl FnMut(&str) -> Option<T>,
) -> Result<(T, TokenUsage)> {
    let mut usage = TokenUsage::default();
    let attempts = retries + 1;
    for _ in 0..attempts {
        let resp = client.complete(request)?;
        usage += resp.usage;
        if let Some(v) = parse(&resp.text) {
            return Ok((v, usage));
        }
    }
    Err(Error::LlmParse {
        attempts,
        message: format!("{} response did not match the expected grammar", request.purpose.as_str()),
    })
}

fn describe_item(catalog: &ItemCatalog, idx: usize, with_attributes: bool) -> String {
    let item = catalog.get(idx);
    if with_attributes && !item.attributes.is_empty() {
        format!("- {} ({})", item.title, item.attributes.join(", "))
    } else {
        format!("- {}", item.title)
    }
}

pub fn angle_request(
    cfg: &ProfilerConfig,
    user_id: &str,
    history: &[usize],
    catalog: &ItemCatalog,
) -> Result<PromptRequest> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let lines: Vec<String> = history.iter().map(|&i| describe_item(catalog, i, true)).collect();
    let text = render(
        &cfg.templates.angle_extraction,
        &[("history", &lines.join("\n")), ("max_angles", &cfg.max_angles.to_string())],
    )?;
    Ok(PromptRequest {
        purpose: PromptPurpose::AngleExtraction,
        rendered_text: text,
        user_id: user_id.to_owned(),
        angle: None,
        model_id: cfg.model_id.clone(),
    })
}

pub fn categorization_request(
    cfg: &ProfilerConfig,
    user_id: &str,
    angle: &str,
    items: &[usize],
    catalog: &ItemCatalog,
) -> Result<PromptRequest> {
    if items.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let lines: Vec<String> = items.iter().map(|&i| describe_item(catalog, i, false)).collect();
    let text = render(
        &cfg.templates.categorization,
        &[("angle", angle), ("items", &lines.join("\n"))],
    )?;
    Ok(PromptRequest {
        purpose: PromptPurpose::Categorization,
        rendered_text: text,
        user_id: user_id.to_owned(),
        angle: Some(angle.to_owned()),
        model_id: cfg.model_id.clone(),
    })
}

pub fn extract_interest_angles(
    client: &dyn LlmClient,
    cfg: &ProfilerConfig,
    user_id: &str,
    history: &[usize],
    catalog: &ItemCatalog,
) -> Result<(InterestAngleSet, TokenUsage)> {
    if cfg.max_angles == 0 {
        return Err(Error::InvalidConfig("max_angles must be at least 1".into()));
    }
    let request = angle_request(cfg, user_id, history, catalog)?;
    let (angles, usage) = with_retries(client, &request, cfg.retries, |text| {
        let a = parse_angle_list(text, cfg.max_angles);
        (!a.is_empty()).then_some(a)
    })?;
    Ok((
        InterestAngleSet {
            user_id: user_id.to_owned(),
            angles,
        },
        usage,
    ))
}

/// A response counts as parseable when at least one item line matched.
pub fn categorize_items(
    client: &dyn LlmClient,
    cfg: &ProfilerConfig,
    user_id: &str,
    angle: &str,
    items: &[usize],
    catalog: &ItemCatalog,
) -> Result<(CategoryAssignment, TokenUsage)> {
    let request = categorization_request(cfg, user_id, angle, items, catalog)?;
    with_retries(client, &request, cfg.retries, |text| {
        let a = parse_categorization(text, angle, items, catalog);
        let matched = a.labels.iter().any(|(_, l)| l != &[UNKNOWN_LABEL]);
        matched.then_some(a)
    })
}

/// LLM-free profile: a single `genre` view whose categories are the catalog
/// attributes of each item.
pub fn attribute_profile(
    user_id: &str,
    history: &[usize],
    catalog: &ItemCatalog,
) -> Result<(InterestAngleSet, Vec<CategoryAssignment>)> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let angle = "genre".to_owned();
    let labels = history
        .iter()
        .map(|&i| {
            let mut l: Vec<String> = Vec::new();
            for a in &catalog.get(i).attributes {
                let n = normalize_label(a);
                if !n.is_empty() && !l.contains(&n) {
                    l.push(n);
                }
            }
            if l.is_empty() {
                l.push(UNKNOWN_LABEL.to_owned());
            }
            (i, l)
        })
        .collect();
    Ok((
        InterestAngleSet {
            user_id: user_id.to_owned(),
            angles: vec![angle.clone()],
        },
        vec![CategoryAssignment { angle, labels }],
    ))
}

// ---------------------------------------------------------------------------
// Text embeddings

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub label: String,
    pub vector: Vec<f64>,
}

pub trait TextEmbedder: Send + Sync {
    fn embed(&self, label: &str, dim: usize) -> Result<TextEmbedding>;
}

/// Deterministic embedding: coordinate `k` is the first eight bytes of
/// `SHA-256(seed_le || label || k_le)` mapped to `[-1, 1)`, then the vector is
/// L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder {
    pub seed: u64,
}

impl TextEmbedder for HashEmbedder {
    fn embed(&self, label: &str, dim: usize) -> Result<TextEmbedding> {
        if dim < 2 {
            return Err(Error::InvalidConfig(format!("embedding dimension must be >= 2, got {dim}")));
        }
        if label.is_empty() {
            return Err(Error::InvalidConfig("cannot embed an empty label".into()));
        }
        let mut v: Vec<f64> = (0..dim as u32)
            .map(|k| {
                let mut h = Sha256::new();
                h.update(self.seed.to_le_bytes());
                h.update(label.as_bytes());
                h.update(k.to_le_bytes());
                let digest = h.finalize();
                let word = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                (word >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        Ok(TextEmbedding {
            label: label.to_owned(),
            vector: v,
        })
    }
}

// ---------------------------------------------------------------------------
// Cost accounting

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelPrice {
    pub usd_per_1k_prompt: f64,
    pub usd_per_1k_completion: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriceTable {
    pub prices: HashMap<String, ModelPrice>,
}

impl PriceTable {
    pub fn with(mut self, model_id: &str, price: ModelPrice) -> Self {
        self.prices.insert(model_id.to_owned(), price);
        self
    }

    pub fn cost(&self, model_id: &str, usage: TokenUsage) -> Result<f64> {
        if usage.prompt_tokens < 0 || usage.completion_tokens < 0 {
            return Err(Error::InvalidUsage(format!(
                "negative token count ({}, {})",
                usage.prompt_tokens, usage.completion_tokens
            )));
        }
        let p = self
            .prices
            .get(model_id)
            .ok_or_else(|| Error::InvalidConfig(format!("no price for model {model_id}")))?;
        Ok(usage.prompt_tokens as f64 / 1000.0 * p.usd_per_1k_prompt
            + usage.completion_tokens as f64 / 1000.0 * p.usd_per_1k_completion)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageRecord {
    pub user_id: String,
    pub model_id: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub total_usd: f64,
    /// Mean spend per distinct user.
    pub per_user_usd: f64,
    pub by_user: BTreeMap<String, f64>,
}

pub fn account_cost(usages: &[UsageRecord], prices: &PriceTable) -> Result<CostReport> {
    if usages.is_empty() {
        return Err(Error::InvalidUsage("no usage records".into()));
    }
    let mut by_user: BTreeMap<String, f64> = BTreeMap::new();
    for u in usages {
        let c = prices.cost(&u.model_id, u.usage)?;
        *by_user.entry(u.user_id.clone()).or_default() += c;
    }
    let total_usd: f64 = by_user.values().sum();
    Ok(CostReport {
        total_usd,
        per_user_usd: total_usd / by_user.len() as f64,
        by_user,
    })
}
