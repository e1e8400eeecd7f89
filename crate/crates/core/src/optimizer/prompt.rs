//! Feedback-agent prompt synthesis: numeric energy diagnostics become
//! rewrite directives, which are rendered through per-stage templates.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::EnergyBreakdown;
use crate::error::{Error, Result};
use crate::scoring::{AttributeRole, AttributeSpec, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CoreCalibration,
    Balancing,
    GlobalFinetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::CoreCalibration => "core_calibration",
            Stage::Balancing => "balancing",
            Stage::GlobalFinetune => "global_finetune",
        })
    }
}

/// Which template renders a prompt: one per stage, plus the one-shot baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    CoreCalibration,
    Balancing,
    GlobalFinetune,
    OneShot,
}

impl From<Stage> for TemplateId {
    fn from(s: Stage) -> Self {
        match s {
            Stage::CoreCalibration => TemplateId::CoreCalibration,
            Stage::Balancing => TemplateId::Balancing,
            Stage::GlobalFinetune => TemplateId::GlobalFinetune,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increase,
    Decrease,
    Maintain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Slight,
    Significant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteDirective {
    pub dim: String,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<Intensity>,
}

impl RewriteDirective {
    pub fn maintain(dim: impl Into<String>) -> Self {
        Self {
            dim: dim.into(),
            direction: Direction::Maintain,
            intensity: None,
        }
    }

    pub fn adjust(dim: impl Into<String>, direction: Direction, intensity: Intensity) -> Self {
        Self {
            dim: dim.into(),
            direction,
            intensity: Some(intensity),
        }
    }
}

/// Thresholds that turn numbers into directive words.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectiveThresholds {
    /// Deviations at or above this are `significant`.
    pub significant: f64,
    /// Constrained dims that shifted more than this get a `maintain` directive
    /// in the balancing stage.
    pub maintain_shift: f64,
    /// Dims with a residual deviation above this are named in global fine-tuning.
    pub residual: f64,
}

impl Default for DirectiveThresholds {
    fn default() -> Self {
        Self {
            significant: 0.25,
            maintain_shift: 0.1,
            residual: 0.05,
        }
    }
}

/// Directive moving `score` toward `target`.
pub fn directive_for(dim: &str, score: f64, target: f64, thresholds: &DirectiveThresholds) -> RewriteDirective {
    let dev = (score - target).abs();
    if score == target {
        return RewriteDirective::maintain(dim);
    }
    let direction = if score < target {
        Direction::Increase
    } else {
        Direction::Decrease
    };
    let intensity = if dev >= thresholds.significant {
        Intensity::Significant
    } else {
        Intensity::Slight
    };
    RewriteDirective::adjust(dim, direction, intensity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewritePrompt {
    pub template_id: TemplateId,
    pub directives: Vec<RewriteDirective>,
    pub source_text: String,
    pub rendered: String,
    /// Whether the template instructs the rewriter to leave unmentioned
    /// attributes alone.
    pub preserve_unmentioned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Text with `{directives}` and `{source_text}` placeholders.
    pub text: String,
    pub preserve_unmentioned: bool,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>, preserve_unmentioned: bool) -> Result<Self> {
        let text = text.into();
        for placeholder in ["{directives}", "{source_text}"] {
            if !text.contains(placeholder) {
                return Err(Error::Config(format!("prompt template lacks {placeholder}")));
            }
        }
        Ok(Self {
            text,
            preserve_unmentioned,
        })
    }

    pub fn load(path: &Path, preserve_unmentioned: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.trim_end().to_string(), preserve_unmentioned)
    }

    fn render(&self, directives: &str, source: &str) -> String {
        self.text
            .replace("{directives}", directives)
            .replace("{source_text}", source)
    }
}

/// Templates for the three refinement stages and the one-shot baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub core_calibration: PromptTemplate,
    pub balancing: PromptTemplate,
    pub global_finetune: PromptTemplate,
    pub one_shot: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let t = |s: &str, preserve| PromptTemplate {
            text: s.to_string(),
            preserve_unmentioned: preserve,
        };
        Self {
            core_calibration: t(
                "Please rewrite the text to better align with the following attributes while preserving semantic content: {directives}. Output only the rewritten story.\n{source_text}",
                true,
            ),
            balancing: t(
                "Please modify the text to {directives}. Output only the rewritten story.\n{source_text}",
                true,
            ),
            global_finetune: t(
                "Please polish the text to {directives}, keeping everything else as it is. Output only the rewritten story.\n{source_text}",
                true,
            ),
            one_shot: t(
                "Please rewrite the following story so that it simultaneously exhibits the following attributes (numbers indicate desired strength): {directives}. Output only the rewritten story.\n{source_text}",
                false,
            ),
        }
    }
}

impl TemplateSet {
    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        match id {
            TemplateId::CoreCalibration => &self.core_calibration,
            TemplateId::Balancing => &self.balancing,
            TemplateId::GlobalFinetune => &self.global_finetune,
            TemplateId::OneShot => &self.one_shot,
        }
    }
}

fn format_strength(v: f64) -> String {
    // 0.7 -> "0.7", 1.0 -> "1.0", 0.25 -> "0.25"
    let s = format!("{v:.2}");
    let trimmed = s.trim_end_matches('0');
    if trimmed.ends_with('.') {
        format!("{trimmed}0")
    } else {
        trimmed.to_string()
    }
}

fn render_directive(d: &RewriteDirective, spec: &AttributeSpec) -> String {
    let name = spec.display_name();
    let strength = format_strength(spec.target);
    match (d.direction, d.intensity) {
        (Direction::Maintain, _) => format!("maintain {name}"),
        (dir, intensity) => {
            let adverb = match intensity {
                Some(Intensity::Significant) => "significantly ",
                Some(Intensity::Slight) => "slightly ",
                None => "",
            };
            let verb = if dir == Direction::Increase {
                "increase"
            } else {
                "reduce"
            };
            format!("{adverb}{verb} {name} (target {strength})")
        }
    }
}

fn join_natural(parts: &[String]) -> String {
    match parts.len() {
        0 => "keep the text as it is".to_string(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

fn strength_block(specs: &[&AttributeSpec]) -> String {
    specs
        .iter()
        .map(|s| format!("{} {}", s.display_name(), format_strength(s.target)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// `Name strength` list of the primary-role dimensions, e.g.
/// `Fear 0.7, Joy 1.0`.
pub fn attribute_block(specs: &[AttributeSpec]) -> String {
    let primary: Vec<&AttributeSpec> = specs
        .iter()
        .filter(|s| s.role == AttributeRole::PrimaryOptimization)
        .collect();
    strength_block(&primary)
}

/// Renders `directives` through the template `id`.
///
/// Stage templates spell out direction and intensity per dimension; the
/// one-shot template lists `Name strength` pairs in configuration order.
pub fn render_prompt(
    id: TemplateId,
    directives: Vec<RewriteDirective>,
    source_text: &str,
    specs: &[AttributeSpec],
    templates: &TemplateSet,
) -> Result<RewritePrompt> {
    let by_id: BTreeMap<&str, &AttributeSpec> = specs.iter().map(|s| (s.id.as_str(), s)).collect();
    let lookup = |dim: &str| {
        by_id
            .get(dim)
            .copied()
            .ok_or_else(|| Error::Config(format!("directive for unknown attribute {dim}")))
    };
    let block = if id == TemplateId::OneShot {
        let mut ordered: Vec<&AttributeSpec> = Vec::new();
        for spec in specs {
            if directives.iter().any(|d| d.dim == spec.id) {
                ordered.push(spec);
            }
        }
        for d in &directives {
            lookup(&d.dim)?;
        }
        strength_block(&ordered)
    } else {
        let parts = directives
            .iter()
            .map(|d| Ok(render_directive(d, lookup(&d.dim)?)))
            .collect::<Result<Vec<_>>>()?;
        join_natural(&parts)
    };
    let template = templates.get(id);
    Ok(RewritePrompt {
        template_id: id,
        rendered: template.render(&block, source_text),
        directives,
        source_text: source_text.to_string(),
        preserve_unmentioned: template.preserve_unmentioned,
    })
}

/// Directives for every primary-role dimension, as issued by the one-shot
/// baseline: adjust toward target, or maintain when already on it.
pub fn one_shot_directives(
    scores: &ScoreVector,
    specs: &[AttributeSpec],
    thresholds: &DirectiveThresholds,
) -> Result<Vec<RewriteDirective>> {
    specs
        .iter()
        .filter(|s| s.role == AttributeRole::PrimaryOptimization)
        .map(|s| Ok(directive_for(&s.id, scores.require(&s.id)?, s.target, thresholds)))
        .collect()
}

/// Stage-specific directive selection.
///
/// - core calibration: the queued primary dims;
/// - balancing: the queued primary dims plus `maintain` for constrained dims
///   whose last shift exceeded the maintain threshold;
/// - global fine-tuning: every primary-role dim with residual deviation above
///   the residual threshold, in queue order.
pub fn stage_directives(
    stage: Stage,
    queue: &[String],
    constrained: &[String],
    scores: &ScoreVector,
    latest: &EnergyBreakdown,
    specs: &[AttributeSpec],
    thresholds: &DirectiveThresholds,
) -> Result<Vec<RewriteDirective>> {
    let spec = |dim: &str| {
        specs
            .iter()
            .find(|s| s.id == dim)
            .ok_or_else(|| Error::Config(format!("unknown attribute {dim}")))
    };
    let adjust = |dim: &String| -> Result<RewriteDirective> {
        Ok(directive_for(dim, scores.require(dim)?, spec(dim)?.target, thresholds))
    };
    match stage {
        Stage::CoreCalibration => queue.iter().map(adjust).collect(),
        Stage::Balancing => {
            let mut out = queue.iter().map(adjust).collect::<Result<Vec<_>>>()?;
            for dim in constrained {
                let shift = latest.shifts.get(dim).copied().unwrap_or(0.0);
                if shift > thresholds.maintain_shift && !out.iter().any(|d| &d.dim == dim) {
                    out.push(RewriteDirective::maintain(dim.clone()));
                }
            }
            Ok(out)
        }
        Stage::GlobalFinetune => queue
            .iter()
            .filter(|dim| latest.deviations.get(*dim).copied().unwrap_or(0.0) > thresholds.residual)
            .map(adjust)
            .collect(),
    }
}
