//! Attribute scorers, classifier calibration and anchor selection.
//!
//! A scorer maps text to an intensity in `[0, 1]`, optionally exposing the raw
//! logit it squashed. The deterministic [`LexiconScorer`] stands in for a
//! trained classifier: `sigmoid(logit(base_rate) + gain · Σ weights / tokens)`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const DEFAULT_ECE_BINS: usize = 10;

/// How a dimension takes part in an optimization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeRole {
    /// Has a target and contributes to the classify term.
    PrimaryOptimization,
    /// Only guarded against drift.
    StabilityConstrained,
    /// Ignored.
    Inactive,
}

/// One control dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub id: String,
    /// Display label used in prompts; defaults to the id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub target: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "default_role")]
    pub role: AttributeRole,
}

fn one() -> f64 {
    1.0
}

fn default_role() -> AttributeRole {
    AttributeRole::PrimaryOptimization
}

impl AttributeSpec {
    pub fn new(id: impl Into<String>, target: f64, alpha: f64) -> Self {
        Self {
            id: id.into(),
            name: None,
            target,
            alpha,
            lambda: 1.0,
            role: AttributeRole::PrimaryOptimization,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn with_role(mut self, role: AttributeRole) -> Self {
        self.role = role;
        self
    }

    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.id)
    }

    pub fn is_active(&self) -> bool {
        self.role != AttributeRole::Inactive
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target) {
            return Err(Error::Config(format!(
                "attribute {}: target {} outside [0, 1]",
                self.id, self.target
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("attribute {}: alpha must be >= 0", self.id)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("attribute {}: lambda must be >= 0", self.id)));
        }
        Ok(())
    }
}

/// Checks every spec and id uniqueness.
pub fn validate_specs(specs: &[AttributeSpec]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for s in specs {
        s.validate()?;
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Config(format!("duplicate attribute id {}", s.id)));
        }
    }
    Ok(())
}

/// Classifier scores for every configured dimension on one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: BTreeMap<String, f64>,
    pub text_hash: String,
}

impl ScoreVector {
    pub fn new(scores: BTreeMap<String, f64>, text: &str) -> Result<Self> {
        if let Some((id, s)) = scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Contract(format!("score {s} for {id} outside [0, 1]")));
        }
        Ok(Self {
            scores,
            text_hash: text_hash(text),
        })
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.scores.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<f64> {
        self.get(id)
            .ok_or_else(|| Error::Contract(format!("no score for attribute {id}")))
    }
}

/// Hex SHA-256 digest of the text.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerOutput {
    pub score: f64,
    pub logit: Option<f64>,
}

pub trait AttributeScorer: Send + Sync {
    fn score(&self, text: &str) -> ScorerOutput;
}

pub type ScorerMap = BTreeMap<String, Box<dyn AttributeScorer>>;

/// Scores `text` on every dimension in `dims`.
pub fn score_all<S: AsRef<str>>(text: &str, scorers: &ScorerMap, dims: &[S]) -> Result<ScoreVector> {
    let mut scores = BTreeMap::new();
    for dim in dims {
        let dim = dim.as_ref();
        let scorer = scorers
            .get(dim)
            .ok_or_else(|| Error::Config(format!("no scorer registered for attribute {dim}")))?;
        scores.insert(dim.to_string(), scorer.score(text).score.clamp(0.0, 1.0));
    }
    ScoreVector::new(scores, text)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `sigmoid(squash_gain · Σ matched weights / token count)`; 0.5 on empty text.
pub fn lexicon_score(text: &str, lexicon: &HashMap<String, f64>, squash_gain: f64) -> Result<f64> {
    if lexicon.is_empty() {
        return Err(Error::Config("lexicon is empty".into()));
    }
    if squash_gain.is_nan() || squash_gain <= 0.0 {
        return Err(Error::Config(format!(
            "squash gain must be positive, got {squash_gain}"
        )));
    }
    Ok(sigmoid(squash_gain * lexicon_evidence(&tokenize(text), lexicon)))
}

fn lexicon_evidence(tokens: &[String], lexicon: &HashMap<String, f64>) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let matched: f64 = tokens.iter().filter_map(|t| lexicon.get(t)).sum();
    matched / tokens.len() as f64
}

/// Parses `term<TAB>weight` lines. Blank lines and `#` comments are skipped.
pub fn parse_lexicon(raw: &str) -> Result<HashMap<String, f64>> {
    let mut out = HashMap::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (term, weight) = line
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("lexicon line {}: expected term<TAB>weight", lineno + 1)))?;
        let weight: f64 = weight
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("lexicon line {}: bad weight {weight:?}", lineno + 1)))?;
        let term = crate::text::normalize_token(term);
        if term.is_empty() {
            return Err(Error::Config(format!("lexicon line {}: empty term", lineno + 1)));
        }
        out.insert(term, weight);
    }
    if out.is_empty() {
        return Err(Error::Config("lexicon is empty".into()));
    }
    Ok(out)
}

pub fn load_lexicon(path: &Path) -> Result<HashMap<String, f64>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lexicon(&raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconScorer {
    lexicon: HashMap<String, f64>,
    gain: f64,
    base_rate: f64,
    temperature: f64,
}

impl LexiconScorer {
    pub fn new(lexicon: HashMap<String, f64>, gain: f64) -> Result<Self> {
        if lexicon.is_empty() {
            return Err(Error::Config("lexicon is empty".into()));
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::Config(format!("squash gain must be positive, got {gain}")));
        }
        Ok(Self {
            lexicon,
            gain,
            base_rate: 0.5,
            temperature: 1.0,
        })
    }

    /// Score reported on text with no lexicon evidence.
    pub fn with_base_rate(mut self, base_rate: f64) -> Result<Self> {
        if !(base_rate > 0.0 && base_rate < 1.0) {
            return Err(Error::Config(format!("base rate must lie in (0, 1), got {base_rate}")));
        }
        self.base_rate = base_rate;
        Ok(self)
    }

    /// Applies a fitted calibration temperature to the raw logit.
    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn lexicon(&self) -> &HashMap<String, f64> {
        &self.lexicon
    }
}

impl AttributeScorer for LexiconScorer {
    fn score(&self, text: &str) -> ScorerOutput {
        let raw = logit(self.base_rate) + self.gain * lexicon_evidence(&tokenize(text), &self.lexicon);
        ScorerOutput {
            score: sigmoid(raw / self.temperature),
            logit: Some(raw),
        }
    }
}

/// Scorer that always reports one value. Stand-in for unimplemented external
/// services (e.g. a toxicity API).
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl AttributeScorer for ConstantScorer {
    fn score(&self, _text: &str) -> ScorerOutput {
        ScorerOutput {
            score: self.0.clamp(0.0, 1.0),
            logit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub temperature: f64,
    pub fitted_on: usize,
    pub ece_before: f64,
    pub ece_after: f64,
}

/// Equal-width-bin expected calibration error.
pub fn expected_calibration_error(probs: &[f64], labels: &[u8], bins: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} probabilities but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if bins == 0 {
        return Err(Error::Contract("bin count must be >= 1".into()));
    }
    if probs.is_empty() {
        return Err(Error::Contract("no samples".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
    }
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        conf[b] += p;
        hits[b] += f64::from(y.min(1));
        count[b] += 1;
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] / nb - conf[b] / nb).abs()
        })
        .sum())
}

const T_MIN: f64 = 0.05;
const T_MAX: f64 = 20.0;

/// Fits a temperature `T` minimizing the NLL of `sigmoid(logit / T)` by
/// golden-section search on `[0.05, 20]`.
pub fn fit_temperature(logits: &[f64], labels: &[u8]) -> Result<CalibrationParams> {
    fit_temperature_with_bins(logits, labels, DEFAULT_ECE_BINS)
}

pub fn fit_temperature_with_bins(logits: &[f64], labels: &[u8], bins: usize) -> Result<CalibrationParams> {
    if logits.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} logits but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "temperature fitting needs >= 10 samples, got {}",
            logits.len()
        )));
    }
    if let Some(y) = labels.iter().find(|y| **y > 1) {
        return Err(Error::Contract(format!("label {y} is not 0 or 1")));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::Contract(format!("non-finite logit {z}")));
    }
    let positives = labels.iter().filter(|y| **y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::IllPosed("temperature scaling needs both label classes".into()));
    }

    // Sorting makes the objective, and hence T, independent of input order.
    let mut samples: Vec<(f64, u8)> = logits.iter().copied().zip(labels.iter().copied()).collect();
    samples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nll = |t: f64| -> f64 {
        samples
            .iter()
            .map(|&(z, y)| {
                let s = z / t;
                // -log sigmoid(s) = softplus(-s), -log(1-sigmoid(s)) = softplus(s)
                if y == 1 {
                    softplus(-s)
                } else {
                    softplus(s)
                }
            })
            .sum()
    };
    let temperature = golden_section_min(nll, T_MIN, T_MAX, 1e-10);

    let before: Vec<f64> = logits.iter().map(|z| sigmoid(*z)).collect();
    let after: Vec<f64> = logits.iter().map(|z| sigmoid(z / temperature)).collect();
    Ok(CalibrationParams {
        temperature,
        fitted_on: logits.len(),
        ece_before: expected_calibration_error(&before, labels, bins)?,
        ece_after: expected_calibration_error(&after, labels, bins)?,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    (lo + hi) / 2.0
}

/// Parses calibration CSV with header `logit,label`.
pub fn read_calibration_csv<R: std::io::Read>(reader: R) -> Result<(Vec<f64>, Vec<u8>)> {
    #[derive(Deserialize)]
    struct Row {
        logit: f64,
        label: u8,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["logit", "label"] {
        return Err(Error::Validation(format!(
            "calibration CSV header must be `logit,label`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        logits.push(row.logit);
        labels.push(row.label);
    }
    Ok((logits, labels))
}

/// An attribute's description embedding, used for anchor selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDescriptor {
    pub id: String,
    pub embedding: Vec<f64>,
}

impl AttributeDescriptor {
    pub fn new(id: impl Into<String>, embedding: Vec<f64>) -> Result<Self> {
        let norm = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self {
            id: id.into(),
            embedding,
        })
    }

    /// Builds a descriptor from an arbitrary nonzero vector by normalizing it.
    pub fn normalized(id: impl Into<String>, raw: Vec<f64>) -> Result<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= 0.0 {
            return Err(Error::Contract("cannot normalize a zero embedding".into()));
        }
        Self::new(id, raw.into_iter().map(|x| x / norm).collect())
    }
}

/// Stock attribute whose embedding has the highest cosine similarity with
/// `new_attr`. Ties go to the lexicographically smallest id.
pub fn select_anchor(new_attr: &AttributeDescriptor, stock: &[AttributeDescriptor]) -> Result<String> {
    if stock.is_empty() {
        return Err(Error::Config("anchor selection needs a non-empty stock".into()));
    }
    let dot = |d: &AttributeDescriptor| -> Result<f64> {
        if d.embedding.len() != new_attr.embedding.len() {
            return Err(Error::Contract(format!(
                "embedding of {} has dimension {}, expected {}",
                d.id,
                d.embedding.len(),
                new_attr.embedding.len()
            )));
        }
        Ok(d.embedding.iter().zip(&new_attr.embedding).map(|(a, b)| a * b).sum())
    };
    let mut best: Option<(&AttributeDescriptor, f64)> = None;
    for d in stock {
        let sim = dot(d)?;
        best = match best {
            Some((b, bs)) if bs > sim || (bs == sim && b.id <= d.id) => Some((b, bs)),
            _ => Some((d, sim)),
        };
    }
    Ok(best.expect("stock is non-empty").0.id.clone())
}
