//! Single-trial strategy recommendation through a text-completion backend.
//!
//! The advisor renders the heterogeneity report as a short user prompt,
//! pairs it with a fixed system prompt that embeds the strategy schema, and
//! validates whatever comes back. Invalid answers are retried with a
//! corrective message naming the problem.

use std::collections::{BTreeMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::HeterogeneityReport;
use crate::strategies::{
    validate_config, ConfigError, ParamValue, RawConfig, StrategyConfig, StrategySchema,
};

pub const MAX_ATTEMPTS: usize = 3;
pub const MAX_TRANSPORT_ATTEMPTS: usize = 3;
pub const API_KEY_ENV: &str = "FEDSEL_LLM_API_KEY";

const SYSTEM_TEMPLATE: &str = "You are an expert in Federated Learning who helps users decide their FL strategy and associated parameters based on the data heterogeneity they describe.

Your ultimate goal is to generate a configuration that orchestrates an FL workflow with optimal predictive performance for the given heterogeneity scenario.

Return format: You must return only a valid configuration in Python dictionary format.

Allowed Schema: <fl_schema>

Return only a single Python dictionary, with no explanations and no extra text.

Examples of valid output:

{'strategy_name': 'fed_avg'}
{'strategy_name': 'fed_prox', 'proximal_mu': 0.7}
{'strategy_name': 'fed_trimmed_avg', 'beta': 0.3}
{'strategy_name': 'krum', 'num_malicious_clients': 1, 'num_clients_to_keep': 3}

Your output must be a valid Python dictionary using single quotes.";

const USER_PREAMBLE: &str = "I have {n} client devices and I've run some EDA on the risks of label skew, feature skew, and weight divergence which may indicate risks of malicious behaviour.\n\nBelow are the results:\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

pub fn system_prompt(schema: &StrategySchema, n_clients: usize) -> String {
    SYSTEM_TEMPLATE.replace("<fl_schema>", &format!("\n{}", schema.render(n_clients)))
}

pub fn build_prompts(
    report: &HeterogeneityReport,
    schema: &StrategySchema,
    n_clients: usize,
) -> PromptPair {
    PromptPair {
        system: system_prompt(schema, n_clients),
        user: format!(
            "{}{}",
            USER_PREAMBLE.replace("{n}", &n_clients.to_string()),
            report.flag_lines()
        ),
    }
}

/// Human-in-the-loop variant: free text stands in for the report block.
pub fn build_prompts_from_description(
    description: &str,
    schema: &StrategySchema,
    n_clients: usize,
) -> PromptPair {
    PromptPair {
        system: system_prompt(schema, n_clients),
        user: description.trim().to_string(),
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct Cursor<'a> {
    s: &'a [u8],
    pos: usize,
}

enum Scalar {
    Str(String),
    Num(ParamValue),
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn string(&mut self) -> Option<String> {
        self.skip_ws();
        let quote = *self.s.get(self.pos)?;
        if quote != b'\'' && quote != b'"' {
            return None;
        }
        let start = self.pos + 1;
        let len = self.s[start..].iter().position(|c| *c == quote)?;
        let text = std::str::from_utf8(&self.s[start..start + len]).ok()?;
        if text.contains('\n') {
            return None;
        }
        self.pos = start + len + 1;
        Some(text.to_string())
    }

    fn number(&mut self) -> Option<ParamValue> {
        self.skip_ws();
        let start = self.pos;
        let is_num = |c: u8| c.is_ascii_digit() || matches!(c, b'+' | b'-' | b'.' | b'e' | b'E');
        while self.pos < self.s.len() && is_num(self.s[self.pos]) {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.s[start..self.pos]).ok()?;
        if !text.bytes().any(|c| c.is_ascii_digit()) {
            return None;
        }
        if text.bytes().all(|c| c.is_ascii_digit() || c == b'-' || c == b'+') {
            return text.parse().ok().map(ParamValue::Int);
        }
        text.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(ParamValue::Real)
    }

    fn scalar(&mut self) -> Option<Scalar> {
        self.skip_ws();
        match self.s.get(self.pos)? {
            b'\'' | b'"' => self.string().map(Scalar::Str),
            _ => self.number().map(Scalar::Num),
        }
    }

    /// A flat map literal starting at the current `{`.
    fn map(&mut self) -> Option<BTreeMap<String, Scalar>> {
        if !self.eat(b'{') {
            return None;
        }
        let mut out = BTreeMap::new();
        if self.eat(b'}') {
            return Some(out);
        }
        loop {
            let key = self.string()?;
            if !self.eat(b':') {
                return None;
            }
            let value = self.scalar()?;
            out.insert(key, value);
            if self.eat(b',') {
                if self.eat(b'}') {
                    return Some(out);
                }
                continue;
            }
            return self.eat(b'}').then_some(out);
        }
    }
}

/// Extracts the first well-formed map literal from a response. Single- and
/// double-quoted forms are both accepted, and anything around the literal
/// (whitespace, code fences, chatter) is ignored.
pub fn parse_config_text(text: &str) -> Result<RawConfig, ConfigError> {
    let bytes = text.as_bytes();
    let found = bytes
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == b'{')
        .find_map(|(i, _)| Cursor { s: bytes, pos: i }.map());
    let Some(mut map) = found else {
        return Err(ConfigError::Unparseable(
            "no configuration literal found".into(),
        ));
    };
    let strategy_name = match map.remove("strategy_name") {
        Some(Scalar::Str(s)) => s,
        Some(Scalar::Num(v)) => {
            return Err(ConfigError::WrongType {
                param: "strategy_name".into(),
                expected: "a string",
                value: v.literal(),
            })
        }
        None => {
            return Err(ConfigError::Unparseable(
                "literal has no 'strategy_name' key".into(),
            ))
        }
    };
    let mut params = BTreeMap::new();
    for (key, value) in map {
        match value {
            Scalar::Num(v) => {
                params.insert(key, v);
            }
            Scalar::Str(s) => {
                return Err(ConfigError::WrongType {
                    param: key,
                    expected: "a number",
                    value: format!("'{s}'"),
                })
            }
        }
    }
    Ok(RawConfig {
        strategy_name,
        params,
    })
}

// ---------------------------------------------------------------------------
// Backends

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transport error: {0}")]
pub struct TransportError(pub String);

/// Anything that turns a chat transcript into a reply.
pub trait CompletionBackend {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, TransportError>;
}

fn yes(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

/// Deterministic stand-in for a model: outlier risk picks krum, then label
/// skew picks fed_prox, then feature skew picks fed_trimmed_avg, otherwise
/// fed_avg. Krum tolerates one malicious client where the client count
/// allows it.
pub fn rule_mock(report: &HeterogeneityReport, n_clients: usize) -> String {
    let config = if report.outlier_risk {
        if n_clients >= 3 {
            let f = (n_clients as i64 - 3).min(1);
            StrategyConfig::krum(f, n_clients as i64 - 1)
        } else {
            StrategyConfig::fed_median()
        }
    } else if report.label_skew {
        StrategyConfig::fed_prox(0.1)
    } else if report.feature_skew {
        StrategyConfig::fed_trimmed_avg(0.2)
    } else {
        StrategyConfig::fed_avg()
    };
    config.to_literal()
}

/// Reads the client count and the three flags back out of a user prompt.
/// Missing fields read as zero clients and "No".
fn read_prompt(user: &str) -> (HeterogeneityReport, usize) {
    let n = user
        .split("I have ")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|w| w.parse().ok())
        .unwrap_or(0);
    let flag = |name: &str| {
        user.lines()
            .any(|l| l.trim() == format!("{name}: {}", yes(true)))
    };
    let report = HeterogeneityReport::from_flags(
        n,
        flag("Label Skew"),
        flag("Feature Skew"),
        flag("Outlier Risk"),
    );
    (report, n)
}

/// Backend answering with [`rule_mock`] applied to the first user message.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleMockBackend;

impl CompletionBackend for RuleMockBackend {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, TransportError> {
        let user = messages
            .iter()
            .find(|m| m.role == "user")
            .map_or("", |m| m.content.as_str());
        let (report, n) = read_prompt(user);
        Ok(rule_mock(&report, n))
    }
}

/// Replays a fixed list of replies, one per call.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    replies: VecDeque<Result<String, TransportError>>,
    pub calls: usize,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            replies: replies.into_iter().map(|s| Ok(s.into())).collect(),
            calls: 0,
        }
    }

    pub fn with_results(replies: impl IntoIterator<Item = Result<String, TransportError>>) -> Self {
        Self {
            replies: replies.into_iter().collect(),
            calls: 0,
        }
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&mut self, _messages: &[ChatMessage]) -> Result<String, TransportError> {
        self.calls += 1;
        self.replies
            .pop_front()
            .unwrap_or_else(|| Err(TransportError("script exhausted".into())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4.1".into(),
            timeout_secs: 60,
        }
    }
}

/// Chat-completion client. Requests and responses are appended as JSON
/// lines to `log_path` when set; the bearer token is never written.
pub struct HttpBackend {
    settings: HttpSettings,
    api_key: String,
    agent: ureq::Agent,
    log_path: Option<PathBuf>,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings, api_key: String, log_path: Option<PathBuf>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .build()
            .into();
        Self { settings, api_key, agent, log_path }
    }

    /// Reads the token from `FEDSEL_LLM_API_KEY`.
    pub fn from_env(settings: HttpSettings, log_path: Option<PathBuf>) -> Result<Self, TransportError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| TransportError(format!("{API_KEY_ENV} is not set")))?;
        Ok(Self::new(settings, key, log_path))
    }

    pub fn endpoint(&self) -> String {
        endpoint_url(&self.settings.base_url)
    }

    fn log(&self, kind: &str, payload: &serde_json::Value) {
        let Some(path) = &self.log_path else { return };
        let mut line = serde_json::json!({ "kind": kind, "payload": payload });
        let redacted = redact(&line.to_string(), &self.api_key);
        if let Ok(v) = serde_json::from_str(&redacted) {
            line = v;
        }
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
            let _ = writeln!(f, "{line}");
        }
    }
}

pub fn endpoint_url(base_url: &str) -> String {
    let base = base_url.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_string()
    } else {
        format!("{base}/chat/completions")
    }
}

/// Replaces every occurrence of `secret` with a placeholder.
pub fn redact(text: &str, secret: &str) -> String {
    if secret.is_empty() {
        text.to_string()
    } else {
        text.replace(secret, "[REDACTED]")
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": self.settings.model,
            "messages": messages,
            "temperature": 0,
        });
        let url = self.endpoint();
        self.log(
            "request",
            &serde_json::json!({ "url": url, "authorization": "Bearer [REDACTED]", "body": body }),
        );
        let result = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .and_then(|mut r| r.body_mut().read_json::<serde_json::Value>());
        let value = match result {
            Ok(v) => v,
            Err(e) => {
                let msg = redact(&e.to_string(), &self.api_key);
                self.log("error", &serde_json::Value::String(msg.clone()));
                return Err(TransportError(msg));
            }
        };
        self.log("response", &value);
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError("response has no message content".into()))
    }
}

// ---------------------------------------------------------------------------
// Recommendation loop

#[derive(Debug, Clone, PartialEq)]
pub struct AdvisorOutcome {
    pub config: StrategyConfig,
    pub attempts: usize,
    pub raw_responses: Vec<String>,
    /// Full conversation, final reply included.
    pub transcript: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdvisorError {
    #[error("backend unreachable after {attempts} attempts: {source}")]
    Transport {
        attempts: usize,
        source: TransportError,
        raw_responses: Vec<String>,
    },
    #[error("no valid configuration after {} attempts: {last_error}", raw_responses.len())]
    Exhausted {
        raw_responses: Vec<String>,
        last_error: ConfigError,
        transcript: Vec<ChatMessage>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub transport_attempts: usize,
    /// First backoff delay; doubled after each transport failure.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: MAX_ATTEMPTS,
            transport_attempts: MAX_TRANSPORT_ATTEMPTS,
            backoff: Duration::from_millis(500),
        }
    }
}

pub fn corrective_message(error: &ConfigError) -> String {
    format!(
        "Your previous answer was rejected: {error}. Return only a single corrected Python dictionary using single quotes."
    )
}

fn complete_with_backoff(
    backend: &mut dyn CompletionBackend,
    messages: &[ChatMessage],
    policy: &RetryPolicy,
) -> Result<String, (usize, TransportError)> {
    let mut delay = policy.backoff;
    let tries = policy.transport_attempts.max(1);
    for attempt in 1..=tries {
        match backend.complete(messages) {
            Ok(text) => return Ok(text),
            Err(e) if attempt == tries => return Err((attempt, e)),
            Err(e) => {
                log::warn!("completion attempt {attempt} failed: {e}");
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
    }
    unreachable!("loop returns on the last attempt")
}

/// Validation loop over an explicit prompt pair.
#[allow(clippy::result_large_err)]
pub fn recommend_with_prompts(
    prompts: &PromptPair,
    schema: &StrategySchema,
    n_clients: usize,
    backend: &mut dyn CompletionBackend,
    policy: &RetryPolicy,
) -> Result<AdvisorOutcome, AdvisorError> {
    let mut messages = vec![
        ChatMessage::system(&prompts.system),
        ChatMessage::user(&prompts.user),
    ];
    let mut raw_responses = Vec::new();
    let mut last_error = ConfigError::Unparseable("no attempts made".into());
    for attempt in 1..=policy.attempts.max(1) {
        let reply = complete_with_backoff(backend, &messages, policy).map_err(|(attempts, source)| {
            AdvisorError::Transport {
                attempts,
                source,
                raw_responses: raw_responses.clone(),
            }
        })?;
        raw_responses.push(reply.clone());
        messages.push(ChatMessage::assistant(&reply));
        match parse_config_text(&reply).and_then(|raw| validate_config(&raw, schema, n_clients)) {
            Ok(config) => {
                return Ok(AdvisorOutcome {
                    config,
                    attempts: attempt,
                    raw_responses,
                    transcript: messages,
                })
            }
            Err(e) => {
                log::info!("attempt {attempt} rejected: {e}");
                messages.push(ChatMessage::user(corrective_message(&e)));
                last_error = e;
            }
        }
    }
    Err(AdvisorError::Exhausted {
        raw_responses,
        last_error,
        transcript: messages,
    })
}

#[allow(clippy::result_large_err)]
pub fn recommend(
    report: &HeterogeneityReport,
    schema: &StrategySchema,
    n_clients: usize,
    backend: &mut dyn CompletionBackend,
) -> Result<AdvisorOutcome, AdvisorError> {
    let prompts = build_prompts(report, schema, n_clients);
    recommend_with_prompts(&prompts, schema, n_clients, backend, &RetryPolicy::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategies::{default_schema, StrategyName};

    fn report(l: bool, f: bool, o: bool) -> HeterogeneityReport {
        HeterogeneityReport::from_flags(4, l, f, o)
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            backoff: Duration::ZERO,
            ..RetryPolicy::default()
        }
    }

    #[test]
    fn user_prompt_matches_format_b() {
        let p = build_prompts(&report(true, false, true), &default_schema(), 4);
        assert!(p.user.starts_with("I have 4 client devices and I've run some EDA"));
        assert!(p.user.ends_with("Label Skew: Yes\nFeature Skew: No\nOutlier Risk: Yes"));
        assert_eq!(p, build_prompts(&report(true, false, true), &default_schema(), 4));
    }

    #[test]
    fn system_prompt_embeds_schema_and_examples() {
        let schema = default_schema();
        let p = build_prompts(&report(false, false, false), &schema, 4);
        assert!(p.system.contains(&schema.render(4)));
        assert!(!p.system.contains("<fl_schema>"));
        assert!(p.system.contains("{'strategy_name': 'fed_prox', 'proximal_mu': 0.7}"));
        let mut smaller = default_schema();
        smaller.strategies.truncate(2);
        let q = build_prompts(&report(false, false, false), &smaller, 4);
        assert_ne!(p.system, q.system);
        assert_eq!(p.user, q.user);
    }

    #[test]
    fn parses_single_quoted_literal() {
        let raw = parse_config_text("{'strategy_name': 'fed_trimmed_avg', 'beta': 0.3}").unwrap();
        assert_eq!(raw.strategy_name, "fed_trimmed_avg");
        assert_eq!(raw.params["beta"], ParamValue::Real(0.3));
    }

    #[test]
    fn parses_fenced_and_double_quoted() {
        let fenced = "Here:\n```python\n{'strategy_name': 'krum', 'num_malicious_clients': 1, 'num_clients_to_keep': 3}\n```\n";
        let raw = parse_config_text(fenced).unwrap();
        assert_eq!(raw.params["num_malicious_clients"], ParamValue::Int(1));
        let json = r#"{"strategy_name": "fed_prox", "proximal_mu": 1e-1}"#;
        assert_eq!(parse_config_text(json).unwrap().params["proximal_mu"], ParamValue::Real(0.1));
    }

    #[test]
    fn takes_first_well_formed_literal() {
        let text = "{not a dict} then {'strategy_name': 'fed_avg'} and {'strategy_name': 'fed_median'}";
        assert_eq!(parse_config_text(text).unwrap().strategy_name, "fed_avg");
    }

    #[test]
    fn rejects_text_without_literal() {
        assert!(matches!(
            parse_config_text("sure, here you go"),
            Err(ConfigError::Unparseable(_))
        ));
        assert!(parse_config_text("{'beta': 0.2}").is_err());
        assert!(parse_config_text("{'strategy_name': 'fed_prox', 'proximal_mu': 'high'}").is_err());
    }

    #[test]
    fn rule_mock_table() {
        assert_eq!(rule_mock(&report(false, false, false), 4), "{'strategy_name': 'fed_avg'}");
        assert_eq!(
            rule_mock(&report(true, false, false), 4),
            "{'strategy_name': 'fed_prox', 'proximal_mu': 0.1}"
        );
        assert_eq!(
            rule_mock(&report(false, true, false), 4),
            "{'strategy_name': 'fed_trimmed_avg', 'beta': 0.2}"
        );
        let k = rule_mock(&report(true, true, true), 4);
        let raw = parse_config_text(&k).unwrap();
        assert_eq!(raw.strategy_name, "krum");
        assert_eq!(raw.params["num_malicious_clients"], ParamValue::Int(1));
        assert_eq!(raw.params["num_clients_to_keep"], ParamValue::Int(3));
    }

    #[test]
    fn rule_mock_backend_reads_prompt() {
        let mut b = RuleMockBackend;
        let out = recommend(&report(false, false, false), &default_schema(), 4, &mut b).unwrap();
        assert_eq!(out.config.name(), StrategyName::FedAvg);
        assert_eq!(out.attempts, 1);
        let out = recommend(&report(false, false, true), &default_schema(), 3, &mut b).unwrap();
        assert_eq!(out.config.name(), StrategyName::Krum);
    }

    #[test]
    fn succeeds_on_third_attempt() {
        let mut b = ScriptedBackend::new([
            "no idea",
            "{'strategy_name': 'fed_prox', 'proximal_mu': 7.0}",
            "{'strategy_name': 'fed_prox', 'proximal_mu': 0.5}",
        ]);
        let p = build_prompts(&report(true, false, false), &default_schema(), 4);
        let out = recommend_with_prompts(&p, &default_schema(), 4, &mut b, &fast()).unwrap();
        assert_eq!(out.attempts, 3);
        assert_eq!(out.raw_responses.len(), 3);
        assert_eq!(out.config, StrategyConfig::fed_prox(0.5));
        let corrections: Vec<&ChatMessage> = out.transcript.iter().filter(|m| m.content.contains("rejected")).collect();
        assert_eq!(corrections.len(), 2);
        assert!(corrections[1].content.contains("proximal_mu"));
    }

    #[test]
    fn exhausts_after_three_failures() {
        let mut b = ScriptedBackend::new(["a", "b", "c", "{'strategy_name': 'fed_avg'}"]);
        let p = build_prompts(&report(true, false, false), &default_schema(), 4);
        match recommend_with_prompts(&p, &default_schema(), 4, &mut b, &fast()) {
            Err(AdvisorError::Exhausted { raw_responses, .. }) => {
                assert_eq!(raw_responses, vec!["a", "b", "c"])
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(b.calls, 3);
    }

    #[test]
    fn transport_errors_retry_then_fail() {
        let err = || Err(TransportError("down".into()));
        let mut b = ScriptedBackend::with_results([err(), err(), Ok("{'strategy_name': 'fed_avg'}".into())]);
        let p = build_prompts(&report(false, false, false), &default_schema(), 4);
        let out = recommend_with_prompts(&p, &default_schema(), 4, &mut b, &fast()).unwrap();
        assert_eq!(out.attempts, 1);
        assert_eq!(b.calls, 3);

        let mut b = ScriptedBackend::with_results([err(), err(), err()]);
        assert!(matches!(
            recommend_with_prompts(&p, &default_schema(), 4, &mut b, &fast()),
            Err(AdvisorError::Transport { attempts: 3, .. })
        ));
    }

    #[test]
    fn endpoint_and_redaction() {
        assert_eq!(endpoint_url("http://x/v1/"), "http://x/v1/chat/completions");
        assert_eq!(endpoint_url("http://x/v1/chat/completions"), "http://x/v1/chat/completions");
        assert_eq!(redact("Bearer sk-123 sk-123", "sk-123"), "Bearer [REDACTED] [REDACTED]");
    }
}
