//! Add-k smoothed unigram / bigram language models.
//!
//! Used both as desk-scale attribute prior providers for fusion and as the
//! fluency proxy behind `ppl_proxy`. A bigram model may be interpolated with
//! its own unigram distribution:
//!
//! `p(w | v) = μ·(c(v,w)+k)/(c(v)+kV) + (1−μ)·(c(w)+k)/(N+kV)`
//!
//! The first token of a sentence is conditioned on a begin-of-sentence row.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{PriorProvider, TokenDistribution, Vocabulary};
use crate::text::tokenize;

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NGramOrder {
    Unigram,
    Bigram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NGramParams {
    pub order: NGramOrder,
    /// Add-k pseudo-count.
    pub k: f64,
    /// Weight μ on the bigram estimate; 1.0 is a pure add-k bigram.
    pub interpolation: f64,
}

impl Default for NGramParams {
    fn default() -> Self {
        Self {
            order: NGramOrder::Bigram,
            k: 0.5,
            interpolation: 1.0,
        }
    }
}

impl NGramParams {
    /// The interpolated k = 0.5 bigram used for attribute prior providers.
    pub fn prior_provider() -> Self {
        Self {
            order: NGramOrder::Bigram,
            k: 0.5,
            interpolation: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    vocab: Arc<Vocabulary>,
    params: NGramParams,
    unigram: Vec<f64>,
    total: f64,
    // Row 0 is the begin-of-sentence context, row v+1 is token v.
    bigram: Vec<f64>,
    row_totals: Vec<f64>,
}

/// Vocabulary of every token in `sentences` (sorted) plus [`UNK`].
pub fn vocabulary_from_corpus<S: AsRef<str>>(sentences: &[S]) -> Result<Vocabulary> {
    let mut set: BTreeSet<String> = sentences.iter().flat_map(|s| tokenize(s.as_ref())).collect();
    set.insert(UNK.to_string());
    Vocabulary::new(set.into_iter().collect())
}

/// Reads a UTF-8 corpus, one text per line, skipping blank lines.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

impl NGramModel {
    /// Trains on raw sentences using the shared `vocab`. Out-of-vocabulary
    /// tokens map to [`UNK`] when the vocabulary has it.
    pub fn train<S: AsRef<str>>(sentences: &[S], vocab: Arc<Vocabulary>, params: NGramParams) -> Result<Self> {
        if !(params.k > 0.0 && params.k.is_finite()) {
            return Err(Error::Config(format!(
                "add-k constant must be positive, got {}",
                params.k
            )));
        }
        if !(0.0..=1.0).contains(&params.interpolation) {
            return Err(Error::Config(format!(
                "interpolation weight must lie in [0, 1], got {}",
                params.interpolation
            )));
        }
        let v = vocab.len();
        let mut model = Self {
            vocab,
            params,
            unigram: vec![0.0; v],
            total: 0.0,
            bigram: vec![0.0; (v + 1) * v],
            row_totals: vec![0.0; v + 1],
        };
        for s in sentences {
            let ids = model.encode(s.as_ref())?;
            let mut prev_row = 0;
            for id in ids {
                model.unigram[id] += 1.0;
                model.total += 1.0;
                model.bigram[prev_row * v + id] += 1.0;
                model.row_totals[prev_row] += 1.0;
                prev_row = id + 1;
            }
        }
        Ok(model)
    }

    /// A model with no observations: every estimate is uniform.
    pub fn untrained(vocab: Arc<Vocabulary>, params: NGramParams) -> Result<Self> {
        Self::train::<&str>(&[], vocab, params)
    }

    pub fn params(&self) -> NGramParams {
        self.params
    }

    /// Maps text to token indices.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text).iter().map(|t| self.lookup(t)).collect()
    }

    fn lookup(&self, token: &str) -> Result<usize> {
        self.vocab
            .index_of(token)
            .or_else(|| self.vocab.index_of(UNK))
            .ok_or_else(|| Error::Contract(format!("token {token:?} is not in the vocabulary")))
    }

    fn unigram_prob(&self, w: usize) -> f64 {
        let v = self.vocab.len() as f64;
        let k = self.params.k;
        let denom = self.total + k * v;
        if denom == 0.0 {
            1.0 / v
        } else {
            (self.unigram[w] + k) / denom
        }
    }

    /// `p(w | prev)`, with `prev = None` meaning sentence start.
    pub fn prob(&self, prev: Option<usize>, w: usize) -> f64 {
        match self.params.order {
            NGramOrder::Unigram => self.unigram_prob(w),
            NGramOrder::Bigram => {
                let v = self.vocab.len();
                let row = prev.map_or(0, |p| p + 1);
                let k = self.params.k;
                let denom = self.row_totals[row] + k * v as f64;
                let bigram = if denom == 0.0 {
                    1.0 / v as f64
                } else {
                    (self.bigram[row * v + w] + k) / denom
                };
                let mu = self.params.interpolation;
                if mu == 1.0 {
                    bigram
                } else {
                    mu * bigram + (1.0 - mu) * self.unigram_prob(w)
                }
            }
        }
    }

    /// Full next-token distribution after `prev`.
    pub fn distribution(&self, prev: Option<usize>) -> Result<TokenDistribution> {
        let weights = (0..self.vocab.len()).map(|w| self.prob(prev, w)).collect();
        TokenDistribution::from_weights(Arc::clone(&self.vocab), weights)
    }

    /// Chain-rule log-likelihood of an index sequence, starting a new sentence.
    pub fn log_likelihood(&self, ids: &[usize]) -> f64 {
        let mut prev = None;
        let mut ll = 0.0;
        for &id in ids {
            ll += self.prob(prev, id).ln();
            prev = Some(id);
        }
        ll
    }
}

impl PriorProvider for NGramModel {
    fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    fn prior(&self, context: &[usize]) -> Result<TokenDistribution> {
        self.distribution(context.last().copied())
    }
}
