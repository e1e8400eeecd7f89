//! Generation-phase fusion of attribute-conditioned token distributions.
//!
//! The fused next-token distribution minimizes the weighted KL objective
//! `J[P] = Σ_i λ_i · KL(P ‖ Q_i)` over the probability simplex. Its closed-form
//! minimizer is the normalized weighted geometric mean
//! `P*(x) ∝ Π_i Q_i(x)^(λ_i / Λ)` with `Λ = Σ_i λ_i`.
//!
//! Priors are smoothed with [`SMOOTHING_EPS`] before fusion and before being
//! used as the reference side of a KL divergence, so no token is annihilated by
//! a single zero prior.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mass added to every prior entry before renormalizing.
pub const SMOOTHING_EPS: f64 = 1e-12;

/// Tolerance on `Σ p = 1` accepted by [`TokenDistribution::new`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Ordered set of distinct token strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract("vocabulary must contain at least one token".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of `n` synthetic tokens `t0 .. t{n-1}`.
    pub fn synthetic(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("t{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

fn same_vocab(a: &Arc<Vocabulary>, b: &Arc<Vocabulary>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Normalized probability vector over a [`Vocabulary`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    vocab: Arc<Vocabulary>,
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(vocab: Arc<Vocabulary>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != vocab.len() {
            return Err(Error::Contract(format!(
                "distribution has {} entries but vocabulary has {}",
                probs.len(),
                vocab.len()
            )));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(Error::Contract(format!("invalid probability {p} at index {i}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Contract(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { vocab, probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(vocab: Arc<Vocabulary>, weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Contract(format!("invalid weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Contract("weights sum to zero".into()));
        }
        Self::new(vocab, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(vocab: Arc<Vocabulary>) -> Self {
        let n = vocab.len();
        Self {
            vocab,
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Adds [`SMOOTHING_EPS`] to every entry and renormalizes.
    pub fn smoothed(&self) -> Self {
        let denom = 1.0 + SMOOTHING_EPS * self.probs.len() as f64;
        Self {
            vocab: Arc::clone(&self.vocab),
            probs: self.probs.iter().map(|p| (p + SMOOTHING_EPS) / denom).collect(),
        }
    }

    fn check_same_vocab(&self, other: &Self) -> Result<()> {
        if same_vocab(&self.vocab, &other.vocab) {
            Ok(())
        } else {
            Err(Error::Contract("distributions are over different vocabularies".into()))
        }
    }
}

/// The attribute priors `Q_i` with their generation weights `λ_i`.
#[derive(Debug, Clone)]
pub struct AttributePriorSet {
    priors: Vec<TokenDistribution>,
    lambdas: Vec<f64>,
}

impl AttributePriorSet {
    pub fn new(priors: Vec<TokenDistribution>, lambdas: Vec<f64>) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::Contract("prior set is empty".into()));
        }
        if priors.len() != lambdas.len() {
            return Err(Error::Contract(format!(
                "{} priors but {} weights",
                priors.len(),
                lambdas.len()
            )));
        }
        if let Some(l) = lambdas.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return Err(Error::Contract(format!(
                "generation weight {l} must be finite and >= 0"
            )));
        }
        if !lambdas.iter().any(|l| *l > 0.0) {
            return Err(Error::Contract(
                "at least one generation weight must be positive".into(),
            ));
        }
        let first = &priors[0];
        for q in &priors[1..] {
            first.check_same_vocab(q)?;
        }
        Ok(Self { priors, lambdas })
    }

    pub fn priors(&self) -> &[TokenDistribution] {
        &self.priors
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// `Λ = Σ λ_i`, positive by construction.
    pub fn total_weight(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        self.priors[0].vocab()
    }
}

/// `KL(p ‖ q)` with `q` smoothed. Zero entries of `p` contribute nothing.
pub fn kl_divergence(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    p.check_same_vocab(q)?;
    let q = q.smoothed();
    let kl = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>();
    // Rounding can leave tiny negatives when p ≈ q.
    Ok(kl.max(0.0))
}

/// `Σ_i λ_i · KL(p ‖ Q_i)`.
pub fn weighted_kl_objective(p: &TokenDistribution, priors: &AttributePriorSet) -> Result<f64> {
    priors
        .priors
        .iter()
        .zip(&priors.lambdas)
        .try_fold(0.0, |acc, (q, l)| Ok(acc + l * kl_divergence(p, q)?))
}

/// Weighted geometric mean of the (smoothed) priors, computed in log space.
pub fn fuse_distributions(priors: &AttributePriorSet) -> Result<TokenDistribution> {
    let total = priors.total_weight();
    let vocab = Arc::clone(priors.vocab());
    let n = vocab.len();
    let smoothed: Vec<TokenDistribution> = priors.priors.iter().map(|q| q.smoothed()).collect();

    let mut log_mass = vec![0.0; n];
    for (q, l) in smoothed.iter().zip(&priors.lambdas) {
        let w = l / total;
        if w == 0.0 {
            continue;
        }
        for (acc, p) in log_mass.iter_mut().zip(&q.probs) {
            *acc += w * p.ln();
        }
    }
    let max = log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_mass.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        let min_prior_mass = smoothed
            .iter()
            .flat_map(|q| q.probs.iter().copied())
            .fold(f64::INFINITY, f64::min);
        return Err(Error::DegenerateFusion {
            vocab_size: n,
            min_prior_mass,
        });
    }
    Ok(TokenDistribution {
        vocab,
        probs: weights.into_iter().map(|w| w / sum).collect(),
    })
}

/// Inverse-CDF draw; cumulative sums run in vocabulary index order.
pub fn sample_token<R: Rng + ?Sized>(dist: &TokenDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut last_supported = 0;
    for (i, p) in dist.probs.iter().enumerate() {
        if *p > 0.0 {
            last_supported = i;
        }
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    // u landed in the rounding gap above the final cumulative sum.
    last_supported
}

/// Something that yields a next-token prior given a context of token indices.
pub trait PriorProvider: Send + Sync {
    fn vocab(&self) -> &Arc<Vocabulary>;

    fn prior(&self, context: &[usize]) -> Result<TokenDistribution>;
}

/// Autoregressively extends `context` by `length` tokens, fusing the
/// providers' priors at every step.
///
/// By convention the base language model, when present, is provider 0 with its
/// own weight.
pub fn generate_sequence<R: Rng + ?Sized>(
    providers: &[&dyn PriorProvider],
    lambdas: &[f64],
    context: &[usize],
    length: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut out = context.to_vec();
    if length == 0 {
        return Ok(out);
    }
    if providers.is_empty() {
        return Err(Error::Contract("no prior providers".into()));
    }
    let vocab = Arc::clone(providers[0].vocab());
    for _ in 0..length {
        let priors = providers
            .iter()
            .map(|p| {
                let q = p.prior(&out)?;
                if !same_vocab(q.vocab(), &vocab) {
                    return Err(Error::Contract(
                        "prior provider returned a distribution on a different vocabulary".into(),
                    ));
                }
                Ok(q)
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = fuse_distributions(&AttributePriorSet::new(priors, lambdas.to_vec())?)?;
        out.push(sample_token(&fused, rng));
    }
    Ok(out)
}
