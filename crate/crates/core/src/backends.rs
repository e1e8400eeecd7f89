//! Rewriter backends.
//!
//! - [`EchoRewriter`] returns the source verbatim.
//! - [`SyntheticRewriter`] applies directives to the text through a
//!   substitution table of attribute terms; deterministic for a seed.
//! - [`HttpRewriter`] calls an external text-generation service with
//!   timeouts and exponential backoff.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::optimizer::prompt::{Direction, Intensity, RewriteDirective};
use crate::text::normalize_token;

/// Environment variable consulted for the bearer token when the config has none.
pub const AUTH_TOKEN_ENV: &str = "CTG_BACKEND_TOKEN";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    /// 4xx responses and invalid backend setup; never retried.
    #[error("backend configuration error: {0}")]
    Config(String),

    #[error("backend service error (HTTP {status}) after {attempts} attempt(s)")]
    Service { status: u16, attempts: u32 },

    #[error("backend protocol error in field `{field}`: {detail}")]
    Protocol { field: String, detail: String },

    #[error("backend returned empty text")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub prompt: String,
    pub source_text: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub request_id: String,
    /// Structured form of the prompt's instructions. Not sent over the wire.
    #[serde(default)]
    pub directives: Vec<RewriteDirective>,
    #[serde(default)]
    pub preserve_unmentioned: bool,
}

pub trait Rewriter: Send + Sync {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EchoRewriter;

impl Rewriter for EchoRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, BackendError> {
        if request.source_text.is_empty() {
            return Err(BackendError::Empty);
        }
        Ok(request.source_text.clone())
    }
}

/// Terms the synthetic rewriter may insert or remove for one attribute.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionEntry {
    #[serde(default)]
    pub insert: Vec<String>,
    #[serde(default)]
    pub remove: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionTable {
    pub entries: BTreeMap<String, SubstitutionEntry>,
    /// Attribute-neutral words that insertions overwrite and removals leave
    /// behind, so edits keep the token count fixed.
    pub fillers: Vec<String>,
}

impl SubstitutionTable {
    fn attribute_terms(&self, dim: &str) -> HashSet<String> {
        self.entries
            .get(dim)
            .map(|e| e.insert.iter().chain(&e.remove).map(|t| normalize_token(t)).collect())
            .unwrap_or_default()
    }
}

fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Deterministic RNG for one request.
pub fn request_rng(seed: u64, request_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), request_id.as_bytes()]))
}

struct Word {
    raw: String,
    norm: String,
    sentence: usize,
}

fn split_words(text: &str) -> Vec<Word> {
    let mut sentence = 0;
    text.split_whitespace()
        .map(|raw| {
            let w = Word {
                raw: raw.to_string(),
                norm: normalize_token(raw),
                sentence,
            };
            if raw.ends_with(['.', '!', '?']) {
                sentence += 1;
            }
            w
        })
        .collect()
}

/// Replaces the alphanumeric core of `raw` with `term`, keeping surrounding
/// punctuation and a leading capital.
fn replace_core(raw: &str, term: &str) -> String {
    let start = raw.find(|c: char| c.is_alphanumeric()).unwrap_or(raw.len());
    let end = raw
        .rfind(|c: char| c.is_alphanumeric())
        .map(|i| i + raw[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(start);
    let capitalized = raw[start..].chars().next().is_some_and(char::is_uppercase);
    let mut core = term.to_string();
    if capitalized {
        let mut chars = core.chars();
        if let Some(first) = chars.next() {
            core = first.to_uppercase().chain(chars).collect();
        }
    }
    format!("{}{}{}", &raw[..start], core, &raw[end.max(start)..])
}

/// Applies `directives` to `source`.
///
/// Increase directives overwrite 1 (slight) or 3 (significant) filler words
/// with insertable terms, searching from sentence `hash(seed, dim) mod
/// sentence_count` onward and appending when no filler remains. Decrease
/// directives overwrite up to as many removable terms with fillers. Terms of
/// maintained dimensions are never touched. When `collateral` is non-zero,
/// each insertion may also insert a term of a random unmentioned attribute.
pub fn synthetic_rewrite<R: Rng + ?Sized>(
    source: &str,
    directives: &[RewriteDirective],
    table: &SubstitutionTable,
    seed: u64,
    collateral: f64,
    rng: &mut R,
) -> Result<String, BackendError> {
    let mut words = split_words(source);
    let sentence_count = words.last().map_or(1, |w| w.sentence + 1).max(1);
    let fillers: HashSet<String> = table.fillers.iter().map(|f| normalize_token(f)).collect();

    let protected: HashSet<String> = directives
        .iter()
        .filter(|d| d.direction == Direction::Maintain)
        .flat_map(|d| table.attribute_terms(&d.dim))
        .collect();
    let mentioned: BTreeSet<&str> = directives.iter().map(|d| d.dim.as_str()).collect();
    let unmentioned: Vec<&String> = table
        .entries
        .keys()
        .filter(|k| !mentioned.contains(k.as_str()))
        .collect();

    let insert_at = |words: &mut Vec<Word>, dim: &str, term: &str| {
        let start = (stable_hash(&[&seed.to_le_bytes(), dim.as_bytes()]) % sentence_count as u64) as usize;
        let slot = (0..sentence_count)
            .map(|k| (start + k) % sentence_count)
            .find_map(|s| words.iter().position(|w| w.sentence == s && fillers.contains(&w.norm)));
        match slot {
            Some(i) => {
                words[i].raw = replace_core(&words[i].raw, term);
                words[i].norm = normalize_token(term);
            }
            None => {
                let sentence = words.last().map_or(0, |w| w.sentence);
                words.push(Word {
                    raw: term.to_string(),
                    norm: normalize_token(term),
                    sentence,
                });
            }
        }
    };

    for d in directives {
        let count = match d.intensity {
            Some(Intensity::Significant) => 3,
            Some(Intensity::Slight) => 1,
            None => 0,
        };
        match d.direction {
            Direction::Maintain => {}
            Direction::Increase => {
                let entry = table
                    .entries
                    .get(&d.dim)
                    .ok_or_else(|| BackendError::Config(format!("no substitution entry for {}", d.dim)))?;
                let choices: Vec<&String> = entry
                    .insert
                    .iter()
                    .filter(|t| !protected.contains(&normalize_token(t)))
                    .collect();
                if choices.is_empty() {
                    return Err(BackendError::Config(format!("no insertable terms for {}", d.dim)));
                }
                for _ in 0..count {
                    let term = *choices.choose(rng).expect("non-empty");
                    insert_at(&mut words, &d.dim, term);
                    if collateral > 0.0 && !unmentioned.is_empty() && rng.gen::<f64>() < collateral {
                        let other = *unmentioned.choose(rng).expect("non-empty");
                        if let Some(t) = table.entries[other]
                            .insert
                            .iter()
                            .filter(|t| !protected.contains(&normalize_token(t)))
                            .collect::<Vec<_>>()
                            .choose(rng)
                        {
                            insert_at(&mut words, other, t);
                        }
                    }
                }
            }
            Direction::Decrease => {
                let entry = table
                    .entries
                    .get(&d.dim)
                    .ok_or_else(|| BackendError::Config(format!("no substitution entry for {}", d.dim)))?;
                if entry.remove.is_empty() {
                    return Err(BackendError::Config(format!("no removable terms for {}", d.dim)));
                }
                let removable: HashSet<String> = entry
                    .remove
                    .iter()
                    .map(|t| normalize_token(t))
                    .filter(|t| !protected.contains(t))
                    .collect();
                let mut removed = 0;
                let mut i = 0;
                while removed < count && i < words.len() {
                    if removable.contains(&words[i].norm) {
                        match table.fillers.first() {
                            Some(f) => {
                                words[i].raw = replace_core(&words[i].raw, f);
                                words[i].norm = normalize_token(f);
                            }
                            None => {
                                words.remove(i);
                                removed += 1;
                                continue;
                            }
                        }
                        removed += 1;
                    }
                    i += 1;
                }
            }
        }
    }
    Ok(words.iter().map(|w| w.raw.as_str()).collect::<Vec<_>>().join(" "))
}

/// Deterministic test double for an LLM rewriter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRewriter {
    pub table: SubstitutionTable,
    pub seed: u64,
    /// Probability that an insertion also touches an unmentioned attribute
    /// when the prompt does not ask to preserve them.
    #[serde(default)]
    pub collateral_rate: f64,
    /// Probability that each adjust directive is carried out at all; below 1
    /// it gives repeated attempts on one prompt different outcomes.
    #[serde(default = "one")]
    pub follow_rate: f64,
}

fn one() -> f64 {
    1.0
}

impl SyntheticRewriter {
    pub fn new(table: SubstitutionTable, seed: u64) -> Self {
        Self {
            table,
            seed,
            collateral_rate: 0.0,
            follow_rate: 1.0,
        }
    }
}

impl Rewriter for SyntheticRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, BackendError> {
        let mut rng = request_rng(self.seed, &request.request_id);
        let collateral = if request.preserve_unmentioned {
            0.0
        } else {
            self.collateral_rate
        };
        let followed: Vec<RewriteDirective> = request
            .directives
            .iter()
            .filter(|d| {
                d.direction == Direction::Maintain || self.follow_rate >= 1.0 || rng.gen::<f64>() < self.follow_rate
            })
            .cloned()
            .collect();
        let out = synthetic_rewrite(
            &request.source_text,
            &followed,
            &self.table,
            self.seed,
            collateral,
            &mut rng,
        )?;
        if out.trim().is_empty() {
            return Err(BackendError::Empty);
        }
        Ok(out)
    }
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Never serialized; falls back to [`AUTH_TOKEN_ENV`].
    #[serde(default, skip_serializing)]
    pub auth_token: Option<String>,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

impl BackendConfig {
    pub fn new(endpoint_url: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            auth_token: None,
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::Config("timeout_ms must be positive".into()));
        }
        if self.endpoint_url.is_empty() {
            return Err(BackendError::Config("endpoint_url is empty".into()));
        }
        Ok(())
    }

    /// Delay before retry `attempt` (1-based): `base · 2^(attempt−1)` with
    /// ±20% jitter.
    pub fn backoff(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let base = self.backoff_base_ms as f64 * 2f64.powi(attempt.saturating_sub(1) as i32);
        let jitter = rng.gen_range(0.8..=1.2);
        Duration::from_secs_f64(base * jitter / 1000.0)
    }

    /// Upper bound on wall time spent in one [`http_rewrite`] call.
    pub fn time_budget(&self) -> Duration {
        let attempts = u64::from(self.max_retries) + 1;
        let backoff: f64 = (1..=self.max_retries)
            .map(|a| self.backoff_base_ms as f64 * 2f64.powi(a as i32 - 1) * 1.2)
            .sum();
        Duration::from_millis(self.timeout_ms * attempts) + Duration::from_secs_f64(backoff / 1000.0)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    source: &'a str,
    max_tokens: u32,
    temperature: f64,
    id: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub text: String,
    pub attempts: u32,
}

fn parse_reply(body: &str, request_id: &str) -> Result<String, BackendError> {
    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| BackendError::Protocol {
        field: "<body>".into(),
        detail: e.to_string(),
    })?;
    let text = value
        .get("text")
        .and_then(|t| t.as_str())
        .ok_or_else(|| BackendError::Protocol {
            field: "text".into(),
            detail: "missing or not a string".into(),
        })?;
    match value.get("id").and_then(|i| i.as_str()) {
        Some(id) if id == request_id => {}
        Some(id) => {
            return Err(BackendError::Protocol {
                field: "id".into(),
                detail: format!("expected {request_id:?}, got {id:?}"),
            })
        }
        None => {
            return Err(BackendError::Protocol {
                field: "id".into(),
                detail: "missing or not a string".into(),
            })
        }
    }
    if text.trim().is_empty() {
        return Err(BackendError::Empty);
    }
    Ok(text.to_string())
}

/// POSTs `request` to the configured endpoint, retrying timeouts, connection
/// failures and 5xx responses with exponential backoff.
pub fn http_rewrite(request: &RewriteRequest, config: &BackendConfig) -> Result<HttpReply, BackendError> {
    config.validate()?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(config.timeout_ms))
        .build()
        .map_err(|e| BackendError::Config(e.to_string()))?;
    let token = config
        .auth_token
        .clone()
        .or_else(|| std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty()));
    let body = WireRequest {
        prompt: &request.prompt,
        source: &request.source_text,
        max_tokens: request.max_tokens,
        temperature: request.temperature,
        id: &request.request_id,
    };
    let mut jitter = rand::thread_rng();
    let total = config.max_retries + 1;
    let mut last_status = None;
    for attempt in 1..=total {
        if attempt > 1 {
            std::thread::sleep(config.backoff(attempt - 1, &mut jitter));
        }
        let mut req = client.post(&config.endpoint_url).json(&body);
        if let Some(t) = &token {
            req = req.bearer_auth(t);
        }
        match req.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    let text = resp.text().map_err(|e| BackendError::Protocol {
                        field: "<body>".into(),
                        detail: e.to_string(),
                    })?;
                    log::debug!("request {} succeeded on attempt {attempt}", request.request_id);
                    return parse_reply(&text, &request.request_id).map(|text| HttpReply {
                        text,
                        attempts: attempt,
                    });
                }
                if status.is_client_error() {
                    return Err(BackendError::Config(format!(
                        "HTTP {} from {}",
                        status.as_u16(),
                        config.endpoint_url
                    )));
                }
                log::warn!(
                    "request {} attempt {attempt}/{total}: HTTP {}",
                    request.request_id,
                    status.as_u16()
                );
                last_status = Some(status.as_u16());
            }
            Err(e) => {
                log::warn!("request {} attempt {attempt}/{total}: {e}", request.request_id);
                last_status = None;
            }
        }
    }
    Err(match last_status {
        Some(status) => BackendError::Service {
            status,
            attempts: total,
        },
        None => BackendError::Timeout { attempts: total },
    })
}

#[derive(Debug, Clone)]
pub struct HttpRewriter {
    pub config: BackendConfig,
}

impl Rewriter for HttpRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, BackendError> {
        http_rewrite(request, &self.config).map(|r| r.text)
    }
}
