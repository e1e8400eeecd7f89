//! Experiment harness: run configuration, reports, τ sweeps, the
//! conflict/overlap comparison, correlation and calibration helpers.
//!
//! Configs may reference lexicons, substitution tables, correlation matrices
//! and corpora by path; [`RunConfig::load`] inlines all of them so the echo
//! stored in a report is enough to re-run it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendConfig, HttpRewriter, Rewriter, SubstitutionTable, SyntheticRewriter, AUTH_TOKEN_ENV};
use crate::correlation::{
    derive_betas_multi, pearson_matrix, CorrelationMatrix, PenaltyConfig, ScoreSampleMatrix, DEFAULT_C,
};
use crate::error::{Error, Result};
use crate::fusion::{generate_sequence, PriorProvider};
use crate::metrics::{average_abs_bias, distinct_n, drift, ngram_perplexity, MetricReport};
use crate::ngram::{vocabulary_from_corpus, NGramModel, NGramParams};
use crate::optimizer::{
    OptimizationConfig, OptimizationRun, Optimizer, PenaltySource, RunStatus, TemplateSet, DEFAULT_TAU, TAU_GRID,
};
use crate::scoring::{
    fit_temperature_with_bins, parse_lexicon, read_calibration_csv, AttributeRole, AttributeSpec, CalibrationParams,
    LexiconScorer, ScoreVector, ScorerMap,
};
use crate::text::tokenize;

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_gain() -> f64 {
    4.0
}

fn default_base_rate() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

fn default_c() -> f64 {
    DEFAULT_C
}

fn default_distinct_ns() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_k() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon_path: Option<PathBuf>,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default = "default_base_rate")]
    pub base_rate: f64,
    #[serde(default = "one")]
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySettings {
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<CorrelationMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix_path: Option<PathBuf>,
}

impl Default for PenaltySettings {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            matrix: None,
            matrix_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<SubstitutionTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_path: Option<PathBuf>,
    #[serde(default)]
    pub collateral_rate: f64,
    #[serde(default = "one")]
    pub follow_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSettings {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSettings {
    #[serde(default = "default_distinct_ns")]
    pub distinct_ns: Vec<usize>,
    /// Training corpus for the perplexity proxy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl_corpus: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl_corpus_path: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub ppl_k: f64,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        Self {
            distinct_ns: default_distinct_ns(),
            ppl_corpus: None,
            ppl_corpus_path: None,
            ppl_k: default_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    #[serde(default = "one")]
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub base: CorpusSource,
    #[serde(default)]
    pub attributes: BTreeMap<String, CorpusSource>,
    pub length: usize,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub attributes: Vec<AttributeSpec>,
    pub scorers: BTreeMap<String, ScorerSettings>,
    #[serde(default)]
    pub optimization: OptimizationConfig,
    #[serde(default)]
    pub penalty: PenaltySettings,
    pub backend: BackendSettings,
    #[serde(default)]
    pub metrics: MetricsSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<TemplateSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationSettings>,
}

/// Command-line overrides, applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub max_iterations: Option<u32>,
    pub attempts: Option<u32>,
    pub backend: Option<BackendKind>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn inline_corpus(source: &mut CorpusSource, base: &Path) -> Result<()> {
    if let Some(p) = source.corpus_path.take() {
        source.corpus = Some(read_lines(&base.join(p))?);
    }
    if source.corpus.as_ref().is_none_or(Vec::is_empty) {
        return Err(Error::Config("generation corpus is missing or empty".into()));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(raw: &str) -> Result<Self> {
        Ok(serde_json::from_str(raw)?)
    }

    /// Parses the file, inlines every referenced file (paths are relative to
    /// the config's directory) and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config = Self::from_json(&read_text(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.inline_files(base)?;
        config.validate()?;
        Ok(config)
    }

    pub fn inline_files(&mut self, base: &Path) -> Result<()> {
        for (id, s) in &mut self.scorers {
            if let Some(p) = s.lexicon_path.take() {
                let parsed = parse_lexicon(&read_text(&base.join(p))?)
                    .map_err(|e| Error::Config(format!("scorer {id}: {e}")))?;
                s.lexicon = Some(parsed.into_iter().collect());
            }
        }
        if let Some(p) = self.penalty.matrix_path.take() {
            let file = fs::File::open(base.join(&p)).map_err(|e| Error::io(base.join(&p), e))?;
            self.penalty.matrix = Some(CorrelationMatrix::read_csv(file)?);
        }
        if let Some(syn) = &mut self.backend.synthetic {
            if let Some(p) = syn.table_path.take() {
                syn.table = Some(serde_json::from_str(&read_text(&base.join(p))?)?);
            }
        }
        if let Some(p) = self.metrics.ppl_corpus_path.take() {
            self.metrics.ppl_corpus = Some(read_lines(&base.join(p))?);
        }
        if let Some(g) = &mut self.generation {
            inline_corpus(&mut g.base, base)?;
            for source in g.attributes.values_mut() {
                inline_corpus(source, base)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        crate::scoring::validate_specs(&self.attributes)?;
        self.optimization.validate()?;
        for spec in self.attributes.iter().filter(|s| s.is_active()) {
            if !self.scorers.contains_key(&spec.id) {
                return Err(Error::Config(format!("no scorer configured for attribute {}", spec.id)));
            }
        }
        for (id, s) in &self.scorers {
            if s.lexicon.is_none() && s.lexicon_path.is_none() {
                return Err(Error::Config(format!(
                    "scorer {id} has neither lexicon nor lexicon_path"
                )));
            }
        }
        if !(self.penalty.c > 0.0 && self.penalty.c.is_finite()) {
            return Err(Error::Config(format!(
                "penalty c must be positive, got {}",
                self.penalty.c
            )));
        }
        match self.backend.kind {
            BackendKind::Synthetic if self.backend.synthetic.is_none() => {
                return Err(Error::Config("backend kind synthetic needs a synthetic section".into()))
            }
            BackendKind::Http => match &self.backend.http {
                None => return Err(Error::Config("backend kind http needs an http section".into())),
                Some(h) => h.validate()?,
            },
            _ => {}
        }
        if let Some(syn) = &self.backend.synthetic {
            if !(0.0..=1.0).contains(&syn.collateral_rate) {
                return Err(Error::Config("collateral_rate must lie in [0, 1]".into()));
            }
            if !(syn.follow_rate > 0.0 && syn.follow_rate <= 1.0) {
                return Err(Error::Config("follow_rate must lie in (0, 1]".into()));
            }
        }
        if self.metrics.distinct_ns.contains(&0) {
            return Err(Error::Config("distinct_ns entries must be >= 1".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.optimization.seed = seed;
        }
        if let Some(tau) = o.tau {
            self.optimization.tau = tau;
        }
        if let Some(m) = o.max_iterations {
            self.optimization.max_iterations = m;
        }
        if let Some(a) = o.attempts {
            self.optimization.attempts_per_iteration = a;
        }
        if let Some(kind) = o.backend {
            self.backend.kind = kind;
        }
        self.validate()
    }

    fn primary_dims(&self) -> BTreeSet<String> {
        self.attributes
            .iter()
            .filter(|s| s.role == AttributeRole::PrimaryOptimization)
            .map(|s| s.id.clone())
            .collect()
    }
}

/// A loaded config turned into live components.
pub struct Pipeline {
    pub config: RunConfig,
    pub scorers: ScorerMap,
    pub rewriter: Box<dyn Rewriter>,
    pub penalty: PenaltySource,
    pub templates: TemplateSet,
    pub ppl_model: Option<NGramModel>,
}

pub fn build_scorers(settings: &BTreeMap<String, ScorerSettings>) -> Result<ScorerMap> {
    let mut map = ScorerMap::new();
    for (id, s) in settings {
        let lexicon: HashMap<String, f64> = s
            .lexicon
            .as_ref()
            .ok_or_else(|| Error::Config(format!("scorer {id} has no inline lexicon")))?
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        let scorer = LexiconScorer::new(lexicon, s.gain)?
            .with_base_rate(s.base_rate)?
            .with_temperature(s.temperature)?;
        map.insert(id.clone(), Box::new(scorer));
    }
    Ok(map)
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let scorers = build_scorers(&config.scorers)?;
        let rewriter: Box<dyn Rewriter> = match config.backend.kind {
            BackendKind::Synthetic => {
                let syn = config.backend.synthetic.as_ref().expect("validated");
                let table = syn
                    .table
                    .clone()
                    .ok_or_else(|| Error::Config("synthetic backend has no inline table".into()))?;
                let mut r = SyntheticRewriter::new(table, config.optimization.seed);
                r.collateral_rate = syn.collateral_rate;
                r.follow_rate = syn.follow_rate;
                Box::new(r)
            }
            BackendKind::Http => {
                let mut http = config.backend.http.clone().expect("validated");
                if http.auth_token.is_none() {
                    http.auth_token = std::env::var(AUTH_TOKEN_ENV).ok();
                }
                Box::new(HttpRewriter { config: http })
            }
        };
        let penalty = match &config.penalty.matrix {
            Some(m) => PenaltySource::Correlation {
                matrix: m.clone(),
                c: config.penalty.c,
            },
            None => PenaltySource::Uniform { c: config.penalty.c },
        };
        let ppl_model = match &config.metrics.ppl_corpus {
            Some(corpus) if !corpus.is_empty() => {
                let vocab = Arc::new(vocabulary_from_corpus(corpus)?);
                let params = NGramParams {
                    k: config.metrics.ppl_k,
                    ..NGramParams::default()
                };
                Some(NGramModel::train(corpus, vocab, params)?)
            }
            _ => None,
        };
        Ok(Self {
            templates: config.templates.clone().unwrap_or_default(),
            config,
            scorers,
            rewriter,
            penalty,
            ppl_model,
        })
    }

    pub fn optimizer<'a>(&'a self, config: &'a OptimizationConfig, specs: &'a [AttributeSpec]) -> Optimizer<'a> {
        Optimizer {
            specs,
            scorers: &self.scorers,
            rewriter: self.rewriter.as_ref(),
            penalty: &self.penalty,
            templates: &self.templates,
            config,
        }
    }

    /// Metrics of `text` against `baseline` scores. Drift is `None` when
    /// every active dimension is a target.
    pub fn metric_report(
        &self,
        text: &str,
        scores: &ScoreVector,
        baseline: &ScoreVector,
        specs: &[AttributeSpec],
    ) -> Result<MetricReport> {
        let tokens = tokenize(text);
        let distinct = self
            .config
            .metrics
            .distinct_ns
            .iter()
            .filter(|&&n| tokens.len() >= n)
            .map(|&n| Ok((n, distinct_n(&tokens, n)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let targets: BTreeSet<String> = specs
            .iter()
            .filter(|s| s.role == AttributeRole::PrimaryOptimization)
            .map(|s| s.id.clone())
            .collect();
        let perplexity = match &self.ppl_model {
            Some(m) if !tokens.is_empty() => Some(ngram_perplexity(text, m)?),
            _ => None,
        };
        let drift = if baseline.scores.keys().any(|k| !targets.contains(k)) {
            Some(drift(scores, baseline, &targets)?)
        } else {
            None
        };
        Ok(MetricReport {
            distinct,
            perplexity,
            drift,
            avg_abs_bias: average_abs_bias(scores, specs, &targets)?,
        })
    }

    /// Optimizes one text with the config's attributes.
    pub fn run_text(&self, text: &str, seed: u64) -> Result<RunReport> {
        let opt = OptimizationConfig {
            seed,
            ..self.config.optimization.clone()
        };
        let run = self.optimizer(&opt, &self.config.attributes).run(text)?;
        let metric_report = self.metric_report(
            &run.final_text,
            &run.final_scores,
            &run.initial_scores,
            &self.config.attributes,
        )?;
        Ok(RunReport {
            schema_version: SCHEMA_VERSION,
            status: run.status,
            seed,
            final_text: run.final_text.clone(),
            metric_report,
            run,
            config: self.config.clone(),
        })
    }

    /// Runs every text of `corpus` independently, in parallel. Text `i` uses
    /// seed `base_seed + i`.
    pub fn run_corpus(&self, corpus: &[String]) -> Result<Vec<RunReport>> {
        let base = self.config.optimization.seed;
        corpus
            .par_iter()
            .enumerate()
            .map(|(i, text)| self.run_text(text, base.wrapping_add(i as u64)))
            .collect()
    }

    fn run_corpus_with(
        &self,
        corpus: &[String],
        opt: &OptimizationConfig,
        specs: &[AttributeSpec],
    ) -> Result<Vec<(usize, OptimizationRun)>> {
        corpus
            .par_iter()
            .enumerate()
            .map(|(i, text)| {
                let config = OptimizationConfig {
                    seed: opt.seed.wrapping_add(i as u64),
                    ..opt.clone()
                };
                Ok((i, self.optimizer(&config, specs).run(text)?))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub status: RunStatus,
    pub seed: u64,
    pub final_text: String,
    pub metric_report: MetricReport,
    /// Trajectory, prompts, attempts and per-iteration scores.
    pub run: OptimizationRun,
    pub config: RunConfig,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        Ok(serde_json::from_str(raw)?)
    }

    pub fn exit_code(&self) -> i32 {
        self.status.exit_code()
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Reads a corpus, one text per line; blank lines are skipped with a warning.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let raw = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            log::warn!("{}:{}: skipping blank line", path.display(), i + 1);
        } else {
            out.push(line.trim().to_string());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub mean_bias: f64,
    pub mean_iterations: f64,
    pub mean_accepted: f64,
    pub mean_attempts: f64,
    pub is_default: bool,
}

/// Runs the corpus once per τ. Early stopping follows τ unless the config
/// fixes `early_stop_tau`.
pub fn sweep_tau(pipeline: &Pipeline, taus: &[f64], corpus: &[String]) -> Result<Vec<SweepRow>> {
    if taus.len() < 2 {
        return Err(Error::Validation("a τ sweep needs at least two values".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Validation("corpus is empty".into()));
    }
    let specs = &pipeline.config.attributes;
    let targets = pipeline.config.primary_dims();
    taus.iter()
        .map(|&tau| {
            let opt = OptimizationConfig {
                tau,
                ..pipeline.config.optimization.clone()
            };
            let runs = pipeline.run_corpus_with(corpus, &opt, specs)?;
            let n = runs.len() as f64;
            let mut row = SweepRow {
                tau,
                mean_bias: 0.0,
                mean_iterations: 0.0,
                mean_accepted: 0.0,
                mean_attempts: 0.0,
                is_default: tau == DEFAULT_TAU,
            };
            for (_, run) in &runs {
                row.mean_bias += average_abs_bias(&run.final_scores, specs, &targets)? / n;
                row.mean_iterations += run.iterations.len() as f64 / n;
                row.mean_accepted += run.accepted_iterations() as f64 / n;
                row.mean_attempts += run.total_attempts() as f64 / n;
            }
            Ok(row)
        })
        .collect()
}

pub fn default_taus() -> Vec<f64> {
    TAU_GRID.to_vec()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "tau",
        "mean_bias",
        "mean_iterations",
        "mean_accepted",
        "mean_attempts",
        "default",
    ])?;
    for r in rows {
        w.write_record([
            r.tau.to_string(),
            r.mean_bias.to_string(),
            r.mean_iterations.to_string(),
            r.mean_accepted.to_string(),
            r.mean_attempts.to_string(),
            r.is_default.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Conflict,
    Overlap,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conflict" => Ok(Scenario::Conflict),
            "overlap" => Ok(Scenario::Overlap),
            other => Err(Error::Validation(format!(
                "unknown scenario {other:?} (expected conflict or overlap)"
            ))),
        }
    }
}

impl Scenario {
    /// Scenario pair followed by the fixed dimensions.
    pub fn targets(self) -> Vec<(&'static str, &'static str, f64)> {
        let pair = match self {
            Scenario::Conflict => [("fear", "Fear", 0.7), ("joy", "Joy", 1.0)],
            Scenario::Overlap => [("romance", "Romance", 0.7), ("love", "Love", 0.7)],
        };
        pair.into_iter()
            .chain([
                ("casual", "Casual", 0.5),
                ("knowledge", "Knowledge", 0.5),
                ("polite", "Polite", 0.5),
                ("nontoxic", "Non-toxic", 1.0),
            ])
            .collect()
    }

    /// Scenario dims as primaries; every other configured scorer becomes a
    /// stability-constrained dimension.
    pub fn specs(self, scorers: &BTreeMap<String, ScorerSettings>) -> Result<Vec<AttributeSpec>> {
        let targets = self.targets();
        let mut specs = Vec::new();
        for (id, name, target) in &targets {
            if !scorers.contains_key(*id) {
                return Err(Error::Config(format!("scenario needs a scorer for {id}")));
            }
            specs.push(AttributeSpec::new(*id, *target, 1.0).with_name(*name));
        }
        for id in scorers.keys() {
            if !targets.iter().any(|(t, _, _)| t == id) {
                specs.push(AttributeSpec::new(id.clone(), 0.5, 1.0).with_role(AttributeRole::StabilityConstrained));
            }
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub avg_abs_bias: f64,
    pub drift: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_proxy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextOutcome {
    pub index: usize,
    pub full_loop: ArmMetrics,
    pub one_shot: ArmMetrics,
    pub loop_status: RunStatus,
}

impl TextOutcome {
    pub fn loop_strictly_better(&self) -> bool {
        self.full_loop.avg_abs_bias < self.one_shot.avg_abs_bias && self.full_loop.drift < self.one_shot.drift
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub attribute_block: String,
    pub texts: Vec<TextOutcome>,
    pub mean_full_loop: ArmMetrics,
    pub mean_one_shot: ArmMetrics,
    /// Share of texts where the loop beats the baseline on both bias and drift.
    pub loop_better_fraction: f64,
}

fn mean_arm(arms: &[&ArmMetrics]) -> ArmMetrics {
    let n = arms.len() as f64;
    let ppl: Option<Vec<f64>> = arms.iter().map(|a| a.ppl_proxy).collect();
    ArmMetrics {
        avg_abs_bias: arms.iter().map(|a| a.avg_abs_bias).sum::<f64>() / n,
        drift: arms.iter().map(|a| a.drift).sum::<f64>() / n,
        ppl_proxy: ppl.map(|p| p.iter().sum::<f64>() / n),
    }
}

impl Pipeline {
    /// Bias, drift against `initial` and perplexity proxy for one arm.
    pub fn arm_metrics(&self, text: &str, initial: &str, specs: &[AttributeSpec]) -> Result<ArmMetrics> {
        let dims: Vec<String> = specs.iter().filter(|s| s.is_active()).map(|s| s.id.clone()).collect();
        let scores = crate::scoring::score_all(text, &self.scorers, &dims)?;
        let baseline = crate::scoring::score_all(initial, &self.scorers, &dims)?;
        let report = self.metric_report(text, &scores, &baseline, specs)?;
        Ok(ArmMetrics {
            avg_abs_bias: report.avg_abs_bias,
            drift: report
                .drift
                .ok_or_else(|| Error::UndefinedMetric("scenario has no stability dimensions".into()))?,
            ppl_proxy: report.perplexity,
        })
    }

    /// Full loop versus one-shot rewrite for every text of the corpus.
    pub fn conflict_experiment(&self, scenario: Scenario, corpus: &[String]) -> Result<ExperimentSummary> {
        if corpus.is_empty() {
            return Err(Error::Validation("corpus is empty".into()));
        }
        let specs = scenario.specs(&self.config.scorers)?;
        let opt = &self.config.optimization;
        let texts = corpus
            .par_iter()
            .enumerate()
            .map(|(i, text)| {
                let config = OptimizationConfig {
                    seed: opt.seed.wrapping_add(i as u64),
                    ..opt.clone()
                };
                let optimizer = self.optimizer(&config, &specs);
                let run = optimizer.run(text)?;
                let (baseline, _) = optimizer.one_shot(text)?;
                Ok(TextOutcome {
                    index: i,
                    full_loop: self.arm_metrics(&run.final_text, text, &specs)?,
                    one_shot: self.arm_metrics(&baseline, text, &specs)?,
                    loop_status: run.status,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let better = texts.iter().filter(|t| t.loop_strictly_better()).count();
        let attribute_block = crate::optimizer::prompt::attribute_block(&specs);
        Ok(ExperimentSummary {
            schema_version: SCHEMA_VERSION,
            scenario,
            attribute_block,
            mean_full_loop: mean_arm(&texts.iter().map(|t| &t.full_loop).collect::<Vec<_>>()),
            mean_one_shot: mean_arm(&texts.iter().map(|t| &t.one_shot).collect::<Vec<_>>()),
            loop_better_fraction: better as f64 / texts.len() as f64,
            texts,
        })
    }

    /// Fused-prior drafting from the config's generation section.
    pub fn generate(&self, seed: u64) -> Result<Vec<String>> {
        let g = self
            .config
            .generation
            .as_ref()
            .ok_or_else(|| Error::Config("config has no generation section".into()))?;
        let corpus = |s: &CorpusSource| s.corpus.clone().unwrap_or_default();
        let all: Vec<String> = std::iter::once(&g.base)
            .chain(g.attributes.values())
            .flat_map(corpus)
            .collect();
        let vocab = Arc::new(vocabulary_from_corpus(&all)?);
        let params = NGramParams::prior_provider();
        let mut models = vec![NGramModel::train(&corpus(&g.base), Arc::clone(&vocab), params)?];
        let mut lambdas = vec![g.base.lambda];
        for source in g.attributes.values() {
            models.push(NGramModel::train(&corpus(source), Arc::clone(&vocab), params)?);
            lambdas.push(source.lambda);
        }
        let providers: Vec<&dyn PriorProvider> = models.iter().map(|m| m as &dyn PriorProvider).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..g.count)
            .map(|_| {
                let ids = generate_sequence(&providers, &lambdas, &[], g.length, &mut rng)?;
                Ok(ids.iter().filter_map(|&i| vocab.token(i)).collect::<Vec<_>>().join(" "))
            })
            .collect()
    }
}

/// Output of the correlation step: matrix plus β for the target dims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOutput {
    pub schema_version: u32,
    pub matrix: CorrelationMatrix,
    pub penalty: PenaltyConfig,
}

pub fn correlate<R: std::io::Read>(scores_csv: R, c: f64, target_dims: &[String]) -> Result<CorrelationOutput> {
    let samples = ScoreSampleMatrix::read_csv(scores_csv)?;
    let matrix = pearson_matrix(&samples)?;
    let penalty = derive_betas_multi(&matrix, target_dims, c)?;
    Ok(CorrelationOutput {
        schema_version: SCHEMA_VERSION,
        matrix,
        penalty,
    })
}

pub fn calibrate<R: std::io::Read>(calib_csv: R, bins: usize) -> Result<CalibrationParams> {
    let (logits, labels) = read_calibration_csv(calib_csv)?;
    fit_temperature_with_bins(&logits, &labels, bins)
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}
