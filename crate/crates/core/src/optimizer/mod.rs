//! Feedback-driven refinement loop.
//!
//! Each iteration renders one stage prompt from the latest energy breakdown
//! and asks the rewriter for up to `attempts_per_iteration` candidates. A
//! candidate replaces the current text only if it strictly lowers the energy,
//! so the accepted energies form a strictly decreasing sequence bounded below
//! by zero. The run stops on the absolute threshold (`E ≤ τ`), on a streak of
//! small relative improvements, or when the iteration budget is spent; the
//! lowest-energy text seen is returned.

pub mod prompt;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, RewriteRequest, Rewriter};
use crate::correlation::{derive_betas_multi, CorrelationMatrix, PenaltyConfig, DEFAULT_C};
use crate::energy::{total_energy, EnergyBreakdown};
use crate::error::{Error, Result};
use crate::scoring::{score_all, validate_specs, AttributeRole, AttributeSpec, ScoreVector, ScorerMap};

pub use prompt::{
    Direction, DirectiveThresholds, Intensity, PromptTemplate, RewriteDirective, RewritePrompt, Stage, TemplateId,
    TemplateSet,
};

pub const DEFAULT_TAU: f64 = 0.025;

/// τ grid for threshold sweeps.
pub const TAU_GRID: [f64; 13] = [
    0.10, 0.08, 0.06, 0.05, 0.04, 0.035, 0.030, 0.028, 0.026, 0.025, 0.024, 0.022, 0.020,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: Stage,
    pub primary_dims: Vec<String>,
    pub constrained_dims: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    pub tau: f64,
    pub max_iterations: u32,
    pub attempts_per_iteration: u32,
    pub early_stop_consecutive: u32,
    /// Relative-improvement cutoff for early stopping; `None` reuses `tau`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_tau: Option<f64>,
    /// Explicit stage plan; derived from the initial deviations when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_plan: Option<Vec<StageSpec>>,
    pub seed: u64,
    pub thresholds: DirectiveThresholds,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            max_iterations: 3,
            attempts_per_iteration: 4,
            early_stop_consecutive: 2,
            early_stop_tau: None,
            stage_plan: None,
            seed: 0,
            thresholds: DirectiveThresholds::default(),
            max_tokens: 512,
            temperature: 0.7,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.max_iterations < 1 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        if self.attempts_per_iteration < 1 {
            return Err(Error::Config("attempts_per_iteration must be >= 1".into()));
        }
        if self.early_stop_consecutive < 1 {
            return Err(Error::Config("early_stop_consecutive must be >= 1".into()));
        }
        if let Some(t) = self.early_stop_tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("early_stop_tau must be positive, got {t}")));
            }
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.max_tokens < 1 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    pub fn early_stop_threshold(&self) -> f64 {
        self.early_stop_tau.unwrap_or(self.tau)
    }
}

/// Where stage penalty coefficients come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltySource {
    /// β derived from attribute correlations, max-aggregated over the stage's
    /// primary dimensions.
    Correlation { matrix: CorrelationMatrix, c: f64 },
    /// Every constrained dimension gets β = c.
    Uniform { c: f64 },
}

impl Default for PenaltySource {
    fn default() -> Self {
        PenaltySource::Uniform { c: DEFAULT_C }
    }
}

impl PenaltySource {
    pub fn c(&self) -> f64 {
        match self {
            PenaltySource::Correlation { c, .. } | PenaltySource::Uniform { c } => *c,
        }
    }

    pub fn for_stage(&self, stage: &StageSpec) -> Result<PenaltyConfig> {
        match self {
            PenaltySource::Uniform { c } => {
                PenaltyConfig::uniform(*c, *c, &stage.primary_dims, &stage.constrained_dims)
            }
            PenaltySource::Correlation { matrix, c } => {
                if stage.primary_dims.is_empty() {
                    return PenaltyConfig::uniform(*c, *c, &[], &stage.constrained_dims);
                }
                derive_betas_multi(matrix, &stage.primary_dims, *c)
            }
        }
    }
}

fn active_ids(specs: &[AttributeSpec]) -> Vec<String> {
    specs.iter().filter(|s| s.is_active()).map(|s| s.id.clone()).collect()
}

fn primary_ids(specs: &[AttributeSpec]) -> Vec<String> {
    specs
        .iter()
        .filter(|s| s.role == AttributeRole::PrimaryOptimization)
        .map(|s| s.id.clone())
        .collect()
}

/// Primary-role dimensions ordered by `α_i · Δ_i`, largest first.
///
/// Ties among positive weighted deviations go to the lexicographically
/// smaller id; dimensions with zero weighted deviation follow in
/// configuration order.
pub fn deviation_queue(breakdown: &EnergyBreakdown, specs: &[AttributeSpec]) -> Vec<String> {
    let mut positive: Vec<(f64, &str)> = Vec::new();
    let mut zero: Vec<&str> = Vec::new();
    for s in specs.iter().filter(|s| s.role == AttributeRole::PrimaryOptimization) {
        let w = s.alpha * breakdown.deviations.get(&s.id).copied().unwrap_or(0.0);
        if w > 0.0 {
            positive.push((w, &s.id));
        } else {
            zero.push(&s.id);
        }
    }
    positive.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    positive
        .into_iter()
        .map(|(_, id)| id.to_string())
        .chain(zero.into_iter().map(str::to_string))
        .collect()
}

/// Default three-stage plan from the initial breakdown: the two worst
/// dimensions, then the remaining off-target ones, then everything.
/// A stage with nothing to do is dropped.
pub fn default_stage_plan(initial: &EnergyBreakdown, specs: &[AttributeSpec]) -> Vec<StageSpec> {
    let active = active_ids(specs);
    let queue = deviation_queue(initial, specs);
    let off_target: Vec<String> = queue
        .iter()
        .filter(|d| initial.deviations.get(*d).copied().unwrap_or(0.0) > 0.0)
        .cloned()
        .collect();
    let stage = |stage: Stage, primaries: Vec<String>| StageSpec {
        stage,
        constrained_dims: active.iter().filter(|d| !primaries.contains(d)).cloned().collect(),
        primary_dims: primaries,
    };
    let mut plan = Vec::new();
    let core: Vec<String> = off_target.iter().take(2).cloned().collect();
    if !core.is_empty() {
        plan.push(stage(Stage::CoreCalibration, core));
    }
    let rest: Vec<String> = off_target.iter().skip(2).cloned().collect();
    if !rest.is_empty() {
        plan.push(stage(Stage::Balancing, rest));
    }
    plan.push(stage(Stage::GlobalFinetune, primary_ids(specs)));
    plan
}

/// Checks disjointness, coverage of the active set, and that every active
/// dimension is primary somewhere or constrained everywhere.
pub fn validate_stage_plan(plan: &[StageSpec], specs: &[AttributeSpec]) -> Result<()> {
    if plan.is_empty() {
        return Err(Error::Config("stage plan is empty".into()));
    }
    let active: BTreeSet<&str> = specs.iter().filter(|s| s.is_active()).map(|s| s.id.as_str()).collect();
    for (i, st) in plan.iter().enumerate() {
        let p: BTreeSet<&str> = st.primary_dims.iter().map(String::as_str).collect();
        let c: BTreeSet<&str> = st.constrained_dims.iter().map(String::as_str).collect();
        if let Some(d) = p.intersection(&c).next() {
            return Err(Error::Config(format!("stage {i}: {d} is both primary and constrained")));
        }
        let union: BTreeSet<&str> = p.union(&c).copied().collect();
        if union != active {
            return Err(Error::Config(format!(
                "stage {i}: primary ∪ constrained must equal the active dimensions"
            )));
        }
        if st.stage != Stage::GlobalFinetune && p.is_empty() {
            return Err(Error::Config(format!(
                "stage {i} ({}) has no primary dimensions",
                st.stage
            )));
        }
    }
    for dim in &active {
        let primary_somewhere = plan.iter().any(|s| s.primary_dims.iter().any(|d| d == dim));
        let constrained_everywhere = plan.iter().all(|s| s.constrained_dims.iter().any(|d| d == dim));
        if !primary_somewhere && !constrained_everywhere {
            return Err(Error::Config(format!(
                "dimension {dim} is neither optimized nor always constrained"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Continue,
    Converged,
    EarlyStopped,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    EarlyStopped,
    Exhausted,
    BackendFailure,
}

impl RunStatus {
    /// Process exit code for this status.
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Converged | RunStatus::EarlyStopped => 0,
            RunStatus::Exhausted => 2,
            RunStatus::BackendFailure => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationState {
    pub iteration: u32,
    pub stage_index: usize,
    pub current_text: String,
    pub current_scores: ScoreVector,
    /// Scores of the text accepted before the current one.
    pub prev_scores: Option<ScoreVector>,
    /// Breakdowns of the initial text and every accepted candidate.
    pub energy_trajectory: Vec<EnergyBreakdown>,
    pub best_text: String,
    pub best_energy: f64,
    pub attempt_counter: u32,
    pub early_stop_streak: u32,
}

impl OptimizationState {
    pub fn new(text: String, scores: ScoreVector, initial: EnergyBreakdown) -> Self {
        Self {
            iteration: 0,
            stage_index: 0,
            best_text: text.clone(),
            best_energy: initial.total,
            current_text: text,
            current_scores: scores,
            prev_scores: None,
            energy_trajectory: vec![initial],
            attempt_counter: 0,
            early_stop_streak: 0,
        }
    }

    pub fn current_energy(&self) -> f64 {
        self.latest().total
    }

    pub fn latest(&self) -> &EnergyBreakdown {
        self.energy_trajectory
            .last()
            .expect("trajectory starts with the initial evaluation")
    }
}

/// Everything energy evaluation needs for one stage.
#[derive(Debug, Clone)]
pub struct EnergyContext<'a> {
    pub specs: &'a [AttributeSpec],
    pub penalty: PenaltyConfig,
    pub constrained: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub iteration: u32,
    pub attempt: u32,
    pub request_id: String,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Stage prompt for the current state: the stage's primary dims in queue
/// order, rendered through the stage template.
pub fn build_prompt(
    state: &OptimizationState,
    stage: &StageSpec,
    specs: &[AttributeSpec],
    thresholds: &DirectiveThresholds,
    templates: &TemplateSet,
) -> Result<RewritePrompt> {
    let queue: Vec<String> = deviation_queue(state.latest(), specs)
        .into_iter()
        .filter(|d| stage.primary_dims.contains(d))
        .collect();
    if queue.is_empty() && stage.stage != Stage::GlobalFinetune {
        return Err(Error::Contract(format!("{} stage with an empty queue", stage.stage)));
    }
    let directives = prompt::stage_directives(
        stage.stage,
        &queue,
        &stage.constrained_dims,
        &state.current_scores,
        state.latest(),
        specs,
        thresholds,
    )?;
    prompt::render_prompt(stage.stage.into(), directives, &state.current_text, specs, templates)
}

/// Deterministic request id for one attempt.
pub fn request_id(seed: u64, iteration: u32, attempt: u32) -> String {
    format!("{seed:016x}-i{iteration}-a{attempt}")
}

/// Asks the rewriter for one candidate and applies accept-if-improving.
#[allow(clippy::too_many_arguments)]
pub fn propose_and_evaluate(
    state: &mut OptimizationState,
    prompt: &RewritePrompt,
    rewriter: &dyn Rewriter,
    scorers: &ScorerMap,
    ctx: &EnergyContext<'_>,
    config: &OptimizationConfig,
    attempt: u32,
) -> Result<AttemptRecord> {
    let id = request_id(config.seed, state.iteration, attempt);
    let request = RewriteRequest {
        prompt: prompt.rendered.clone(),
        source_text: state.current_text.clone(),
        max_tokens: config.max_tokens,
        temperature: config.temperature,
        request_id: id.clone(),
        directives: prompt.directives.clone(),
        preserve_unmentioned: prompt.preserve_unmentioned,
    };
    let rejected = |state: &mut OptimizationState, energy, hash, error| {
        state.attempt_counter += 1;
        AttemptRecord {
            iteration: state.iteration,
            attempt,
            request_id: id.clone(),
            accepted: false,
            energy,
            text_hash: hash,
            error,
        }
    };
    let candidate = match rewriter.rewrite(&request) {
        Ok(text) if !text.trim().is_empty() => text,
        Ok(_) => return Ok(rejected(state, None, None, Some(BackendError::Empty.to_string()))),
        Err(e) => {
            log::warn!("rewrite {id} failed: {e}");
            return Ok(rejected(state, None, None, Some(e.to_string())));
        }
    };
    let dims = active_ids(ctx.specs);
    let scores = score_all(&candidate, scorers, &dims)?;
    let energy = total_energy(
        &scores,
        Some(&state.current_scores),
        ctx.specs,
        &ctx.penalty,
        &ctx.constrained,
    )?;
    if energy.total < state.best_energy {
        state.best_energy = energy.total;
        state.best_text = candidate.clone();
    }
    let hash = scores.text_hash.clone();
    if energy.total < state.current_energy() {
        let previous = state.current_energy();
        let relative = (previous - energy.total) / previous;
        if relative < config.early_stop_threshold() {
            state.early_stop_streak += 1;
        } else {
            state.early_stop_streak = 0;
        }
        state.prev_scores = Some(std::mem::replace(&mut state.current_scores, scores));
        state.current_text = candidate;
        state.energy_trajectory.push(energy.clone());
        Ok(AttemptRecord {
            iteration: state.iteration,
            attempt,
            request_id: id,
            accepted: true,
            energy: Some(energy),
            text_hash: Some(hash),
            error: None,
        })
    } else {
        Ok(rejected(state, Some(energy), Some(hash), None))
    }
}

/// Stopping rule after an accepted step. `Converged` wins over
/// `EarlyStopped`, which wins over `Exhausted`.
pub fn check_termination(state: &OptimizationState, config: &OptimizationConfig) -> Termination {
    let traj = &state.energy_trajectory;
    let last = state.current_energy();
    let improved = traj.len() < 2 || last < traj[traj.len() - 2].total;
    if last <= config.tau && improved {
        return Termination::Converged;
    }
    if state.early_stop_streak >= config.early_stop_consecutive {
        return Termination::EarlyStopped;
    }
    if state.iteration >= config.max_iterations {
        return Termination::Exhausted;
    }
    Termination::Continue
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub stage: Stage,
    pub attempts: u32,
    pub accepted: bool,
    /// All attempts failed in the backend.
    pub backend_failed: bool,
    pub energy: f64,
    pub scores: ScoreVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRun {
    pub status: RunStatus,
    pub initial_text: String,
    pub final_text: String,
    pub initial_scores: ScoreVector,
    pub final_scores: ScoreVector,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub stage_plan: Vec<StageSpec>,
    pub energy_trajectory: Vec<EnergyBreakdown>,
    pub prompts: Vec<RewritePrompt>,
    pub attempts: Vec<AttemptRecord>,
    pub iterations: Vec<IterationRecord>,
    /// Indices into `iterations` that ended without an accepted candidate.
    pub stalled_iterations: Vec<u32>,
}

impl OptimizationRun {
    pub fn accepted_iterations(&self) -> usize {
        self.iterations.iter().filter(|i| i.accepted).count()
    }

    pub fn total_attempts(&self) -> usize {
        self.attempts.len()
    }
}

/// Everything a run needs besides the text.
pub struct Optimizer<'a> {
    pub specs: &'a [AttributeSpec],
    pub scorers: &'a ScorerMap,
    pub rewriter: &'a dyn Rewriter,
    pub penalty: &'a PenaltySource,
    pub templates: &'a TemplateSet,
    pub config: &'a OptimizationConfig,
}

impl Optimizer<'_> {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        validate_specs(self.specs)?;
        if !self.specs.iter().any(|s| s.role == AttributeRole::PrimaryOptimization) {
            return Err(Error::Config("no dimension has role primary_optimization".into()));
        }
        for id in active_ids(self.specs) {
            if !self.scorers.contains_key(&id) {
                return Err(Error::Config(format!("no scorer registered for attribute {id}")));
            }
        }
        if let Some(plan) = &self.config.stage_plan {
            validate_stage_plan(plan, self.specs)?;
        }
        Ok(())
    }

    /// Runs the staged refinement loop from `initial_text`.
    pub fn run(&self, initial_text: &str) -> Result<OptimizationRun> {
        self.validate()?;
        let config = self.config;
        let dims = active_ids(self.specs);
        let initial_scores = score_all(initial_text, self.scorers, &dims)?;
        let no_penalty = PenaltyConfig::uniform(self.penalty.c(), 0.0, &[], &[])?;
        let initial = total_energy(&initial_scores, None, self.specs, &no_penalty, &BTreeSet::new())?;
        let plan = match &config.stage_plan {
            Some(p) => p.clone(),
            None => default_stage_plan(&initial, self.specs),
        };
        validate_stage_plan(&plan, self.specs)?;

        let initial_energy = initial.total;
        let mut state = OptimizationState::new(initial_text.to_string(), initial_scores.clone(), initial);
        let mut prompts = Vec::new();
        let mut attempts = Vec::new();
        let mut iterations = Vec::new();
        let mut stalled = Vec::new();

        let mut status = if check_termination(&state, config) == Termination::Converged {
            Some(RunStatus::Converged)
        } else {
            None
        };

        while status.is_none() && state.iteration < config.max_iterations {
            state.stage_index = (state.iteration as usize).min(plan.len() - 1);
            let stage = &plan[state.stage_index];
            let ctx = EnergyContext {
                specs: self.specs,
                penalty: self.penalty.for_stage(stage)?,
                constrained: stage.constrained_dims.iter().cloned().collect(),
            };
            let rendered = build_prompt(&state, stage, self.specs, &config.thresholds, self.templates)?;

            let mut accepted = false;
            let mut failures = 0;
            let mut used = 0;
            for attempt in 0..config.attempts_per_iteration {
                let record = propose_and_evaluate(
                    &mut state,
                    &rendered,
                    self.rewriter,
                    self.scorers,
                    &ctx,
                    config,
                    attempt,
                )?;
                used += 1;
                if record.error.is_some() {
                    failures += 1;
                }
                accepted = record.accepted;
                attempts.push(record);
                if accepted {
                    break;
                }
            }
            prompts.push(rendered);
            let backend_failed = failures == used;
            iterations.push(IterationRecord {
                iteration: state.iteration,
                stage: stage.stage,
                attempts: used,
                accepted,
                backend_failed,
                energy: state.current_energy(),
                scores: state.current_scores.clone(),
            });
            if !accepted {
                log::info!("iteration {} ({}) stalled", state.iteration, stage.stage);
                stalled.push(state.iteration);
            }
            state.iteration += 1;
            if backend_failed {
                status = Some(RunStatus::BackendFailure);
                break;
            }
            status = match check_termination(&state, config) {
                Termination::Continue => None,
                Termination::Converged if accepted => Some(RunStatus::Converged),
                Termination::Converged => None,
                Termination::EarlyStopped => Some(RunStatus::EarlyStopped),
                Termination::Exhausted => Some(RunStatus::Exhausted),
            };
        }
        let status = status.unwrap_or(RunStatus::Exhausted);

        let final_text = state.best_text.clone();
        let final_scores = score_all(&final_text, self.scorers, &dims)?;
        Ok(OptimizationRun {
            status,
            initial_text: initial_text.to_string(),
            final_text,
            initial_scores,
            final_scores,
            initial_energy,
            final_energy: state.best_energy,
            stage_plan: plan,
            energy_trajectory: state.energy_trajectory,
            prompts,
            attempts,
            iterations,
            stalled_iterations: stalled,
        })
    }

    /// Single unconditional rewrite with the one-shot template naming every
    /// primary dimension. Baseline arm for the conflict experiments.
    pub fn one_shot(&self, initial_text: &str) -> Result<(String, RewritePrompt)> {
        self.validate()?;
        let dims = active_ids(self.specs);
        let scores = score_all(initial_text, self.scorers, &dims)?;
        let directives = prompt::one_shot_directives(&scores, self.specs, &self.config.thresholds)?;
        let rendered = prompt::render_prompt(
            TemplateId::OneShot,
            directives,
            initial_text,
            self.specs,
            self.templates,
        )?;
        let request = RewriteRequest {
            prompt: rendered.rendered.clone(),
            source_text: initial_text.to_string(),
            max_tokens: self.config.max_tokens,
            temperature: self.config.temperature,
            request_id: format!("{:016x}-oneshot", self.config.seed),
            directives: rendered.directives.clone(),
            preserve_unmentioned: rendered.preserve_unmentioned,
        };
        let text = self.rewriter.rewrite(&request).map_err(Error::Backend)?;
        Ok((text, rendered))
    }
}
