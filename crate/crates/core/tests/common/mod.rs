#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use ctg_core::backends::{BackendError, RewriteRequest, Rewriter};
use ctg_core::harness::{Pipeline, RunConfig};
use ctg_core::scoring::{AttributeScorer, ScorerMap, ScorerOutput};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn load(name: &str) -> RunConfig {
    RunConfig::load(&fixtures().join(name)).unwrap()
}

pub fn pipeline(name: &str) -> Pipeline {
    Pipeline::new(load(name)).unwrap()
}

pub fn stories() -> Vec<String> {
    ctg_core::harness::read_corpus(&fixtures().join("corpora/stories.txt")).unwrap()
}

/// Texts of the form `a=0.20;b=0.50`, so scores can be set directly.
pub fn encode(scores: &BTreeMap<String, f64>) -> String {
    scores
        .iter()
        .map(|(k, v)| format!("{k}={v:.6}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn decode(text: &str) -> BTreeMap<String, f64> {
    text.split(';')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.parse().unwrap()))
        .collect()
}

/// Reads its own dimension out of an encoded text.
pub struct EncodedScorer(pub String);

impl AttributeScorer for EncodedScorer {
    fn score(&self, text: &str) -> ScorerOutput {
        ScorerOutput {
            score: decode(text).get(&self.0).copied().unwrap_or(0.0),
            logit: None,
        }
    }
}

pub fn encoded_scorers(dims: &[&str]) -> ScorerMap {
    dims.iter()
        .map(|d| {
            (
                d.to_string(),
                Box::new(EncodedScorer(d.to_string())) as Box<dyn AttributeScorer>,
            )
        })
        .collect()
}

/// Moves the worst-deviating dimension `step` toward its target.
pub struct WorstDimRewriter {
    pub targets: BTreeMap<String, f64>,
    pub step: f64,
}

impl Rewriter for WorstDimRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, BackendError> {
        let mut scores = decode(&request.source_text);
        let worst = self
            .targets
            .iter()
            .max_by(|a, b| {
                let da = (scores[a.0] - a.1).abs();
                let db = (scores[b.0] - b.1).abs();
                da.total_cmp(&db).then_with(|| b.0.cmp(a.0))
            })
            .map(|(k, t)| (k.clone(), *t))
            .unwrap();
        let s = scores[&worst.0];
        let moved = if s < worst.1 {
            (s + self.step).min(worst.1)
        } else {
            (s - self.step).max(worst.1)
        };
        scores.insert(worst.0, moved);
        Ok(encode(&scores))
    }
}

/// Returns a fixed text for every request.
pub struct FixedRewriter(pub String);

impl Rewriter for FixedRewriter {
    fn rewrite(&self, _: &RewriteRequest) -> Result<String, BackendError> {
        Ok(self.0.clone())
    }
}

pub struct FailingRewriter;

impl Rewriter for FailingRewriter {
    fn rewrite(&self, _: &RewriteRequest) -> Result<String, BackendError> {
        Err(BackendError::Timeout { attempts: 3 })
    }
}
