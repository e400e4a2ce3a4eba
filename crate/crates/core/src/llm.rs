//! Chat clients for multimodal LLM services, prompt templates, and the
//! sub-query output parser.
//!
//! [`ChatModel`] has two implementations. [`RemoteChat`] speaks the
//! OpenAI-compatible chat-completions protocol and sends images as base64
//! data-URLs. [`ScriptedChat`] answers from a JSONL script keyed by
//! `(kind, sample_id, iteration)` and is what every test runs against.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder};
use crate::http::{self, Attempt, InflightLimiter, RetryPolicy, Telemetry};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("chat service returned {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed chat response: {0}")]
    MalformedResponse(String),
    #[error("no scripted response for {kind}/{sample_id}/{iteration}")]
    ScriptMiss {
        kind: PromptKind,
        sample_id: String,
        iteration: usize,
    },
    #[error("missing prompt slot `{0}`")]
    MissingSlot(String),
    #[error("could not parse sub-queries: {0}")]
    ParseFailure(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("invalid llm config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageData {
    Bytes(Vec<u8>),
    Url(String),
}

impl ImageData {
    fn to_url(&self) -> String {
        match self {
            ImageData::Bytes(b) => http::data_url(b),
            ImageData::Url(u) => u.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(ImageData),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self::user(vec![Part::Text(text.into())])
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.parts.is_empty() {
            return Err(LlmError::InvalidMessage("message has no parts".into()));
        }
        if self.role != Role::User && self.parts.iter().any(|p| matches!(p, Part::Image(_))) {
            return Err(LlmError::InvalidMessage(
                "image parts are only allowed in user messages".into(),
            ));
        }
        Ok(())
    }

    /// Concatenated text parts.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    InitialDescription,
    QueryExpansion,
    QueryGeneration,
    RecordGeneration,
    FinalAnswer,
    FewshotEm,
}

impl PromptKind {
    pub const ALL: [PromptKind; 6] = [
        PromptKind::InitialDescription,
        PromptKind::QueryExpansion,
        PromptKind::QueryGeneration,
        PromptKind::RecordGeneration,
        PromptKind::FinalAnswer,
        PromptKind::FewshotEm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::InitialDescription => "initial-description",
            PromptKind::QueryExpansion => "query-expansion",
            PromptKind::QueryGeneration => "query-generation",
            PromptKind::RecordGeneration => "record-generation",
            PromptKind::FinalAnswer => "final-answer",
            PromptKind::FewshotEm => "fewshot-em",
        }
    }
}

impl std::fmt::Display for PromptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const TEMPLATE_VERSION: u32 = 1;

const INITIAL_DESCRIPTION: &str =
    "Question: {question}\n Concisely describe image which is relevant to question.\n";

const QUERY_EXPANSION: &str = "Question: {question}\n{reasoning_record}\n";

const QUERY_GENERATION: &str = "\
Question: {question}
Knowledge: {reasoning_records}

Please first analyze all the information in a section named Analysis (## Analysis).
Generate two follow-up questions to search for additional information and helpful to confirm knowledge, in a section named Queries (## Queries).
Your output should be in the following format:

## Analysis
Analysis question and knowledge to ask context-specific queries that helps to address question.
## Queries
Question 1: question 1.
Question 2: question 2.";

const RECORD_GENERATION: &str = "\
Question: {question}
Knowledge: {knowledge}

Based on image, description and knowledge, summarize correct and relevant information with image and question.";

const FINAL_ANSWER: &str = "\
Please answer the following question using the provided information and image.

Question: {question}
Relevant Knowledge: {reasoning_records}

Based on the information, provide a detailed answer to the question.";

const FEWSHOT_HEADER: &str = "\
Answer the knowledge-intensive question based on the provided image and context.
Generate a concise and accurate answer grounded in the retrieved information.
Use the context to support reasoning, and directly output the final answer.
";

pub const DEFAULT_DEMO_COUNT: usize = 3;

fn number_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "Zero", "One", "Two", "Three", "Four", "Five", "Six", "Seven", "Eight", "Nine", "Ten",
    ];
    WORDS
        .get(n)
        .map(|w| w.to_string())
        .unwrap_or_else(|| n.to_string())
}

fn image_placeholder(i: usize) -> String {
    format!("[Image {i} Content]")
}

const MAIN_IMAGE_PLACEHOLDER: &str = "[Main Image Content]";

/// Few-shot exact-answer template for `n` demonstrations.
pub fn fewshot_template(n: usize) -> String {
    let mut t = String::from(FEWSHOT_HEADER);
    let noun = if n == 1 { "example is" } else { "examples are" };
    t.push_str(&format!("\n{} {noun} shown below:\n", number_word(n)));
    for i in 1..=n {
        t.push_str(&format!(
            "\n##Example {i}:\n{}\n##Context: {{few_shot_context_{i}}}\n##Question: {{few_shot_question_{i}}}\n##Best Answer: {{few_shot_answer_{i}}}\n",
            image_placeholder(i)
        ));
    }
    t.push_str(&format!(
        "\nNow, answer this question\n{MAIN_IMAGE_PLACEHOLDER}\n##Context: {{reasoning_records}}\n##Question: {{question}}\n##Best Answer:"
    ));
    t
}

pub fn template(kind: PromptKind) -> std::borrow::Cow<'static, str> {
    match kind {
        PromptKind::InitialDescription => INITIAL_DESCRIPTION.into(),
        PromptKind::QueryExpansion => QUERY_EXPANSION.into(),
        PromptKind::QueryGeneration => QUERY_GENERATION.into(),
        PromptKind::RecordGeneration => RECORD_GENERATION.into(),
        PromptKind::FinalAnswer => FINAL_ANSWER.into(),
        PromptKind::FewshotEm => fewshot_template(DEFAULT_DEMO_COUNT).into(),
    }
}

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([a-z0-9_]+)\}").expect("placeholder regex"));

fn fill(template: &str, slots: &[(&str, &str)]) -> Result<String, LlmError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut last = 0;
    for cap in PLACEHOLDER.captures_iter(template) {
        let whole = cap.get(0).expect("match");
        let name = &cap[1];
        let value = slots
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| LlmError::MissingSlot(name.to_string()))?;
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// Instantiates the stored template for `kind`. Slot values are inserted
/// verbatim and never re-scanned for placeholders.
pub fn render_prompt(kind: PromptKind, slots: &[(&str, &str)]) -> Result<String, LlmError> {
    fill(&template(kind), slots)
}

/// The query-expansion string for a question and the latest record.
pub fn expand_query(question: &str, reasoning_record: &str) -> String {
    fill(
        QUERY_EXPANSION,
        &[
            ("question", question),
            ("reasoning_record", reasoning_record),
        ],
    )
    .expect("expansion slots are fixed")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuerySet {
    pub analysis: String,
    pub questions: Vec<String>,
}

static QUESTION_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^[\s>*•+\-]*(?:\d+[.)]\s*)?[*_\s]*(?:sub[- ]?)?(?:question|query|q)\s*#?\s*(\d+)\s*[*_]*\s*[:.)\-–]\s*[*_]*\s*(.*?)[*_\s]*$",
    )
    .expect("question regex")
});

static LIST_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:[-*•+]|\d+[.)])\s+(.+?)\s*$").expect("list regex"));

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Analysis,
    Queries,
}

fn section_header(line: &str) -> Option<Section> {
    let t = line
        .trim()
        .trim_start_matches('#')
        .trim()
        .trim_matches('*')
        .trim()
        .trim_end_matches(':')
        .trim()
        .to_ascii_lowercase();
    match t.as_str() {
        "analysis" => Some(Section::Analysis),
        "queries" | "query" | "questions" | "follow-up questions" => Some(Section::Queries),
        _ => None,
    }
}

fn question_from_line(line: &str) -> Option<String> {
    let cap = QUESTION_LINE.captures(line)?;
    let q = cap[2].trim();
    (!q.is_empty()).then(|| q.to_string())
}

/// Extracts the analysis and the first two "Question n:" lines.
///
/// Lines are first looked for under the `## Queries` header; when that
/// yields fewer than two, every line of the output is scanned, and finally
/// plain bulleted or numbered lines under the header are accepted.
pub fn parse_subqueries(raw: &str) -> Result<SubQuerySet, LlmError> {
    if raw.trim().is_empty() {
        return Err(LlmError::ParseFailure("empty output".into()));
    }
    let mut section = None;
    let mut analysis = Vec::new();
    let mut under_queries = Vec::new();
    let mut listed = Vec::new();
    let mut anywhere = Vec::new();
    for line in raw.lines() {
        if let Some(s) = section_header(line) {
            section = Some(s);
            continue;
        }
        let q = question_from_line(line);
        if let Some(q) = &q {
            anywhere.push(q.clone());
        }
        match section {
            Some(Section::Analysis) => analysis.push(line),
            Some(Section::Queries) => {
                if let Some(q) = q {
                    under_queries.push(q);
                } else if let Some(c) = LIST_LINE.captures(line) {
                    listed.push(c[1].to_string());
                }
            }
            None => {}
        }
    }
    let questions = [under_queries, anywhere, listed]
        .into_iter()
        .find(|qs| qs.len() >= 2)
        .ok_or_else(|| LlmError::ParseFailure("fewer than two questions found".into()))?;
    Ok(SubQuerySet {
        analysis: analysis.join("\n").trim().to_string(),
        questions: questions.into_iter().take(2).collect(),
    })
}

/// Identifies one model call; the scripted client keys responses on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallTag {
    pub kind: PromptKind,
    pub sample_id: String,
    pub iteration: usize,
}

impl CallTag {
    pub fn new(kind: PromptKind, sample_id: impl Into<String>, iteration: usize) -> Self {
        Self {
            kind,
            sample_id: sample_id.into(),
            iteration,
        }
    }
}

pub trait ChatModel: Send + Sync {
    fn chat(&self, tag: &CallTag, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

fn check_messages(messages: &[ChatMessage]) -> Result<(), LlmError> {
    if messages.is_empty() {
        return Err(LlmError::InvalidMessage("no messages".into()));
    }
    messages.iter().try_for_each(ChatMessage::validate)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub key: CallTag,
    pub response: String,
}

/// Deterministic chat model backed by a response table.
#[derive(Debug, Clone, Default)]
pub struct ScriptedChat {
    responses: HashMap<CallTag, String>,
}

impl ScriptedChat {
    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Result<Self, LlmError> {
        let mut responses = HashMap::new();
        for e in entries {
            let key = e.key.clone();
            if responses.insert(e.key, e.response).is_some() {
                return Err(LlmError::InvalidConfig(format!(
                    "duplicate script key {}/{}/{}",
                    key.kind, key.sample_id, key.iteration
                )));
            }
        }
        Ok(Self { responses })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                LlmError::InvalidConfig(format!("{}:{}: {e}", path.as_ref().display(), n + 1))
            })?;
            entries.push(e);
        }
        Self::from_entries(entries)
    }

    pub fn insert(&mut self, tag: CallTag, response: impl Into<String>) {
        self.responses.insert(tag, response.into());
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatModel for ScriptedChat {
    fn chat(&self, tag: &CallTag, messages: &[ChatMessage]) -> Result<String, LlmError> {
        check_messages(messages)?;
        self.responses
            .get(tag)
            .cloned()
            .ok_or_else(|| LlmError::ScriptMiss {
                kind: tag.kind,
                sample_id: tag.sample_id.clone(),
                iteration: tag.iteration,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub mode: LlmMode,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub script_path: Option<PathBuf>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
}

fn default_max_tokens() -> u32 {
    1024
}
fn default_api_key_env() -> String {
    crate::embed::DEFAULT_API_KEY_ENV.to_string()
}
fn default_timeout() -> u64 {
    120
}
fn default_inflight() -> usize {
    8
}

impl LlmConfig {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        Self {
            mode: LlmMode::Scripted,
            endpoint: None,
            model: String::new(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            script_path: Some(path.into()),
            api_key_env: default_api_key_env(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
            max_inflight: default_inflight(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            mode: LlmMode::Remote,
            endpoint: Some(endpoint.into()),
            model: model.into(),
            script_path: None,
            ..Self::scripted("")
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(LlmError::InvalidConfig("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidConfig(
                "max_tokens must be positive".into(),
            ));
        }
        match self.mode {
            LlmMode::Scripted if self.script_path.is_none() => Err(LlmError::InvalidConfig(
                "scripted mode requires script_path".into(),
            )),
            LlmMode::Remote if self.endpoint.is_none() => Err(LlmError::InvalidConfig(
                "remote mode requires endpoint".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn ChatModel>, LlmError> {
        self.validate()?;
        Ok(match self.mode {
            LlmMode::Scripted => Arc::new(ScriptedChat::load(
                self.script_path.as_ref().expect("validated"),
            )?),
            LlmMode::Remote => Arc::new(RemoteChat::new(self.clone())?),
        })
    }
}

/// OpenAI-compatible chat-completions client with retry and an in-flight cap.
pub struct RemoteChat {
    cfg: LlmConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    limiter: InflightLimiter,
    telemetry: Telemetry,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<serde_json::Value>,
}

/// Status used internally for client-side timeouts.
const TIMEOUT_STATUS: u16 = 408;

impl RemoteChat {
    pub fn new(cfg: LlmConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            api_key: std::env::var(&cfg.api_key_env).ok(),
            limiter: InflightLimiter::new(cfg.max_inflight),
            telemetry: Telemetry::default(),
            client,
            cfg,
        })
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }

    pub fn request_body(&self, messages: &[ChatMessage]) -> serde_json::Value {
        let msgs: Vec<serde_json::Value> = messages
            .iter()
            .map(|m| {
                let content: Vec<serde_json::Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => serde_json::json!({"type": "text", "text": t}),
                        Part::Image(img) => serde_json::json!({
                            "type": "image_url",
                            "image_url": {"url": img.to_url()},
                        }),
                    })
                    .collect();
                match m.role {
                    Role::User => serde_json::json!({"role": m.role, "content": content}),
                    _ => serde_json::json!({"role": m.role, "content": m.text()}),
                }
            })
            .collect();
        serde_json::json!({
            "model": self.cfg.model,
            "messages": msgs,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        })
    }
}

fn extract_content(text: &str) -> Result<String, LlmError> {
    let parsed: CompletionResponse =
        serde_json::from_str(text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let content = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| LlmError::MalformedResponse("no choices".into()))?;
    match content {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
            .collect()),
        other => Err(LlmError::MalformedResponse(format!(
            "unexpected content {other}"
        ))),
    }
}

impl ChatModel for RemoteChat {
    fn chat(&self, tag: &CallTag, messages: &[ChatMessage]) -> Result<String, LlmError> {
        check_messages(messages)?;
        let endpoint = self.cfg.endpoint.as_deref().unwrap_or_default();
        let body = self.request_body(messages);
        let _permit = self.limiter.acquire();
        tracing::debug!(kind = %tag.kind, sample = %tag.sample_id, iteration = tag.iteration, "chat");
        let outcome = http::with_retries(&self.cfg.retry, &self.telemetry, || {
            let mut req = self.client.post(endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) if e.is_timeout() => {
                    return Ok(Attempt::Retry(TIMEOUT_STATUS, e.to_string()))
                }
                Err(e) => return Ok(Attempt::Retry(0, e.to_string())),
            };
            let status = resp.status().as_u16();
            let text = resp
                .text()
                .map_err(|e| LlmError::Transport(e.to_string()))?;
            if (200..300).contains(&status) {
                Ok(Attempt::Done(text))
            } else if http::is_retryable_status(status) {
                Ok(Attempt::Retry(status, text))
            } else {
                Err(LlmError::Http { status, body: text })
            }
        })?;
        match outcome {
            Ok(text) => extract_content(&text),
            Err((0, msg)) => Err(LlmError::Transport(msg)),
            Err((TIMEOUT_STATUS, _)) => Err(LlmError::Timeout),
            Err((429, _)) => Err(LlmError::RateLimited {
                attempts: self.cfg.retry.max_retries + 1,
            }),
            Err((status, body)) => Err(LlmError::Http { status, body }),
        }
    }
}

/// One in-context demonstration for the exact-answer prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demo {
    pub image: ImageData,
    pub context: String,
    pub question: String,
    pub answer: String,
}

/// Demonstration pool row as stored on disk (JSONL).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub image: String,
    pub context: String,
    pub question: String,
    pub answer: String,
}

/// Indices of the `n` pool entries whose questions are most similar to
/// `question` (ties by pool order).
pub fn select_demos(
    question: &str,
    pool: &[DemoRecord],
    provider: &dyn Embedder,
    n: usize,
) -> Result<Vec<usize>, EmbedError> {
    let q = provider.embed_text(question)?;
    let mut scored = Vec::with_capacity(pool.len());
    for (i, d) in pool.iter().enumerate() {
        scored.push((q.dot(&provider.embed_text(&d.question)?), i));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, i)| i).collect())
}

/// Builds the exact-answer prompt: each demo image sits where its
/// `[Image n Content]` marker would be, the query image at
/// `[Main Image Content]`. With no demos this is the plain final-answer
/// prompt preceded by the image.
pub fn build_fewshot_prompt(
    question: &str,
    image: ImageData,
    records: &str,
    demos: &[Demo],
) -> Result<Vec<ChatMessage>, LlmError> {
    if demos.is_empty() {
        let text = render_prompt(
            PromptKind::FinalAnswer,
            &[("question", question), ("reasoning_records", records)],
        )?;
        return Ok(vec![ChatMessage::user(vec![
            Part::Image(image),
            Part::Text(text),
        ])]);
    }
    let names: Vec<[String; 3]> = (1..=demos.len())
        .map(|i| {
            [
                format!("few_shot_context_{i}"),
                format!("few_shot_question_{i}"),
                format!("few_shot_answer_{i}"),
            ]
        })
        .collect();
    let mut slots: Vec<(&str, &str)> = vec![("question", question), ("reasoning_records", records)];
    for (d, n) in demos.iter().zip(&names) {
        slots.push((&n[0], &d.context));
        slots.push((&n[1], &d.question));
        slots.push((&n[2], &d.answer));
    }
    let rendered = fill(&fewshot_template(demos.len()), &slots)?;

    let mut markers: Vec<(String, ImageData)> = demos
        .iter()
        .enumerate()
        .map(|(i, d)| (image_placeholder(i + 1), d.image.clone()))
        .collect();
    markers.push((MAIN_IMAGE_PLACEHOLDER.to_string(), image));

    let mut parts = Vec::new();
    let mut rest = rendered.as_str();
    for (marker, img) in markers {
        let line = format!("{marker}\n");
        let at = rest
            .find(&line)
            .ok_or_else(|| LlmError::MissingSlot(marker.clone()))?;
        if at > 0 {
            parts.push(Part::Text(rest[..at].to_string()));
        }
        parts.push(Part::Image(img));
        rest = &rest[at + line.len()..];
    }
    if !rest.is_empty() {
        parts.push(Part::Text(rest.to_string()));
    }
    Ok(vec![ChatMessage::user(parts)])
}
