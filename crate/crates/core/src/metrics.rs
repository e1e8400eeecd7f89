//! Evaluation metrics: distinct-n, n-gram perplexity proxy, drift and
//! average absolute bias.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ngram::NGramModel;
use crate::scoring::{AttributeSpec, ScoreVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// distinct-n keyed by n.
    pub distinct: BTreeMap<usize, f64>,
    /// Perplexity under the add-k n-gram model, not an LLM.
    #[serde(rename = "ppl_proxy", skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<f64>,
    pub avg_abs_bias: f64,
}

/// Unique n-grams over total n-grams.
pub fn distinct_n<S: AsRef<str>>(tokens: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::UndefinedMetric("distinct-n needs n >= 1".into()));
    }
    if tokens.len() < n {
        return Err(Error::UndefinedMetric(format!(
            "distinct-{n} needs at least {n} tokens, got {}",
            tokens.len()
        )));
    }
    let total = tokens.len() - n + 1;
    let unique: HashSet<Vec<&str>> = tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
        .collect();
    Ok(unique.len() as f64 / total as f64)
}

/// `exp(−(1/T) Σ log p(token | context))` under `model`.
pub fn ngram_perplexity(text: &str, model: &NGramModel) -> Result<f64> {
    let ids = model.encode(text)?;
    if ids.is_empty() {
        return Err(Error::UndefinedMetric("perplexity of an empty sequence".into()));
    }
    Ok((-model.log_likelihood(&ids) / ids.len() as f64).exp())
}

/// Mean `|C(x) − C(baseline)|` over the dimensions of `baseline` not in
/// `target_dims`.
pub fn drift(scores: &ScoreVector, baseline: &ScoreVector, target_dims: &BTreeSet<String>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (dim, &b) in &baseline.scores {
        if target_dims.contains(dim) {
            continue;
        }
        sum += (scores.require(dim)? - b).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "drift needs at least one non-target dimension".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// Mean `|C_i(x) − T_i|` over `target_dims`.
pub fn average_abs_bias(scores: &ScoreVector, specs: &[AttributeSpec], target_dims: &BTreeSet<String>) -> Result<f64> {
    if target_dims.is_empty() {
        return Err(Error::UndefinedMetric(
            "bias needs at least one target dimension".into(),
        ));
    }
    let mut sum = 0.0;
    for dim in target_dims {
        let spec = specs
            .iter()
            .find(|s| &s.id == dim)
            .ok_or_else(|| Error::Contract(format!("no target defined for {dim}")))?;
        sum += (scores.require(dim)? - spec.target).abs();
    }
    Ok(sum / target_dims.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Vocabulary;
    use crate::ngram::{NGramOrder, NGramParams};
    use std::sync::Arc;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn sv(pairs: &[(&str, f64)]) -> ScoreVector {
        ScoreVector::new(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(), "t").unwrap()
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn distinct_examples() {
        assert_eq!(distinct_n(&toks("a a a a"), 1).unwrap(), 0.25);
        assert_eq!(distinct_n(&toks("a b c d"), 2).unwrap(), 1.0);
        assert_eq!(distinct_n(&toks("a b a b a"), 2).unwrap(), 0.5);
        assert!(matches!(distinct_n(&toks("a"), 2), Err(Error::UndefinedMetric(_))));
        assert!(distinct_n(&toks("a"), 0).is_err());
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        let vocab = Arc::new(Vocabulary::synthetic(7).unwrap());
        let params = NGramParams {
            order: NGramOrder::Unigram,
            ..Default::default()
        };
        let model = NGramModel::untrained(vocab, params).unwrap();
        let ppl = ngram_perplexity("t0 t3 t3 t6", &model).unwrap();
        assert!((ppl - 7.0).abs() < 1e-9);
        assert!(matches!(ngram_perplexity("", &model), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn memorized_sentence_approaches_one() {
        let corpus = ["the cat sat"];
        let vocab = Arc::new(crate::ngram::vocabulary_from_corpus(&corpus).unwrap());
        let mut last = f64::INFINITY;
        for k in [0.5, 0.1, 1e-3, 1e-6] {
            let params = NGramParams {
                k,
                ..Default::default()
            };
            let model = NGramModel::train(&corpus, Arc::clone(&vocab), params).unwrap();
            let ppl = ngram_perplexity("the cat sat", &model).unwrap();
            assert!(ppl < last);
            last = ppl;
        }
        assert!(last < 1.0 + 1e-4);
    }

    #[test]
    fn held_out_chain_rule() {
        let corpus = ["a b", "b a", "a a"];
        let vocab = Arc::new(crate::ngram::vocabulary_from_corpus(&corpus).unwrap());
        let model = NGramModel::train(&corpus, vocab, NGramParams::default()).unwrap();
        // V = {<unk>, a, b}; BOS row: a×2, b×1; row a: b×1, a×1; row b: a×1.
        let p_b_bos = (1.0 + 0.5) / (3.0 + 1.5);
        let p_b_b = 0.5 / (1.0 + 1.5);
        let expected = (-(f64::ln(p_b_bos) + f64::ln(p_b_b)) / 2.0).exp();
        let ppl = ngram_perplexity("b b", &model).unwrap();
        assert!((ppl - expected).abs() < 1e-12);
    }

    #[test]
    fn drift_examples() {
        let base = sv(&[("a", 0.5), ("x", 0.2), ("y", 0.5)]);
        assert_eq!(drift(&base, &base, &set(&["a"])).unwrap(), 0.0);
        let moved = sv(&[("a", 0.9), ("x", 0.3), ("y", 0.8)]);
        assert!((drift(&moved, &base, &set(&["a"])).unwrap() - 0.2).abs() < 1e-12);
        let targets_only = sv(&[("a", 0.9), ("x", 0.2), ("y", 0.5)]);
        assert_eq!(drift(&targets_only, &base, &set(&["a"])).unwrap(), 0.0);
        assert!(matches!(
            drift(&base, &base, &set(&["a", "x", "y"])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn bias_examples() {
        let specs = [
            AttributeSpec::new("fear", 0.7, 1.0),
            AttributeSpec::new("joy", 1.0, 1.0),
        ];
        let scores = sv(&[("fear", 0.6), ("joy", 0.9)]);
        assert!((average_abs_bias(&scores, &specs, &set(&["fear", "joy"])).unwrap() - 0.1).abs() < 1e-12);
        assert!((average_abs_bias(&scores, &specs, &set(&["fear"])).unwrap() - 0.1).abs() < 1e-12);
        let perfect = sv(&[("fear", 0.7), ("joy", 1.0)]);
        assert_eq!(average_abs_bias(&perfect, &specs, &set(&["fear", "joy"])).unwrap(), 0.0);
        assert!(average_abs_bias(&scores, &specs, &set(&[])).is_err());
    }
}
