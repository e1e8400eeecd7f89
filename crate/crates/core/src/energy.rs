//! Composite energy of a candidate text.
//!
//! `E(x) = Σ_i α_i |C_i(x) − T_i|  +  Σ_j β_j |C_j(x) − C_j(x_prev)|`
//!
//! The first sum runs over dimensions whose role is
//! [`AttributeRole::PrimaryOptimization`]; the second over the stage's
//! stability-constrained set, against the last accepted text. Deviations are
//! recorded for every scored dimension so the prompt builder sees the whole
//! attribute space.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::correlation::PenaltyConfig;
use crate::error::{Error, Result};
use crate::scoring::{AttributeRole, AttributeSpec, ScoreVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub classify_term: f64,
    pub overlap_term: f64,
    pub total: f64,
    /// `|C_i(x) − T_i|` for every active dimension.
    pub deviations: BTreeMap<String, f64>,
    /// `|C_j(x) − C_j(x_prev)|` for every constrained dimension; empty on the
    /// first evaluation of a run.
    pub shifts: BTreeMap<String, f64>,
}

/// `Σ α_i |C_i − T_i|` over primary-role dimensions, plus deviations for all
/// active dimensions.
pub fn classify_term(scores: &ScoreVector, specs: &[AttributeSpec]) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut deviations = BTreeMap::new();
    let mut term = 0.0;
    for spec in specs.iter().filter(|s| s.is_active()) {
        let c = scores.require(&spec.id)?;
        let dev = (c - spec.target).abs();
        if spec.role == AttributeRole::PrimaryOptimization {
            term += spec.alpha * dev;
        }
        deviations.insert(spec.id.clone(), dev);
    }
    Ok((term, deviations))
}

/// `Σ β_j |C_j(x) − C_j(x_prev)|` over `constrained`.
pub fn overlap_penalty(
    scores: &ScoreVector,
    prev_scores: &ScoreVector,
    penalty: &PenaltyConfig,
    constrained: &BTreeSet<String>,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut shifts = BTreeMap::new();
    let mut term = 0.0;
    for dim in constrained {
        let beta = penalty
            .beta(dim)
            .ok_or_else(|| Error::Config(format!("no penalty coefficient for constrained dimension {dim}")))?;
        let shift = (scores.require(dim)? - prev_scores.require(dim)?).abs();
        term += beta * shift;
        shifts.insert(dim.clone(), shift);
    }
    Ok((term, shifts))
}

/// Full breakdown. Without a predecessor text the overlap term is 0.
pub fn total_energy(
    scores: &ScoreVector,
    prev_scores: Option<&ScoreVector>,
    specs: &[AttributeSpec],
    penalty: &PenaltyConfig,
    constrained: &BTreeSet<String>,
) -> Result<EnergyBreakdown> {
    let (classify, deviations) = classify_term(scores, specs)?;
    let (overlap, shifts) = match prev_scores {
        Some(prev) => overlap_penalty(scores, prev, penalty, constrained)?,
        None => (0.0, BTreeMap::new()),
    };
    Ok(EnergyBreakdown {
        classify_term: classify,
        overlap_term: overlap,
        total: classify + overlap,
        deviations,
        shifts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(pairs: &[(&str, f64)]) -> ScoreVector {
        ScoreVector::new(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(), "t").unwrap()
    }

    fn penalty(pairs: &[(&str, f64)]) -> PenaltyConfig {
        PenaltyConfig {
            c: 0.3,
            betas: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            target_dims: vec![],
            fallback_dims: vec![],
        }
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn classify_zero_at_targets() {
        let specs = [AttributeSpec::new("a", 0.4, 1.0), AttributeSpec::new("b", 0.9, 2.0)];
        let (t, dev) = classify_term(&sv(&[("a", 0.4), ("b", 0.9)]), &specs).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(dev["a"], 0.0);
    }

    #[test]
    fn classify_worked_example() {
        let specs = [AttributeSpec::new("a", 0.5, 1.0), AttributeSpec::new("b", 0.5, 0.5)];
        let scores = sv(&[("a", 0.7), ("b", 0.4)]);
        let (t, _) = classify_term(&scores, &specs).unwrap();
        assert!((t - 0.25).abs() < 1e-12);
        let doubled = [AttributeSpec::new("a", 0.5, 2.0), AttributeSpec::new("b", 0.5, 1.0)];
        let (t2, _) = classify_term(&scores, &doubled).unwrap();
        assert!((t2 - 2.0 * t).abs() < 1e-15);
    }

    #[test]
    fn classify_skips_constrained_but_records_deviation() {
        let specs = [
            AttributeSpec::new("a", 0.5, 1.0),
            AttributeSpec::new("b", 0.1, 1.0).with_role(AttributeRole::StabilityConstrained),
            AttributeSpec::new("c", 0.1, 1.0).with_role(AttributeRole::Inactive),
        ];
        let (t, dev) = classify_term(&sv(&[("a", 0.6), ("b", 0.9)]), &specs).unwrap();
        assert!((t - 0.1).abs() < 1e-12);
        assert!((dev["b"] - 0.8).abs() < 1e-12);
        assert!(!dev.contains_key("c"));
    }

    #[test]
    fn classify_missing_score() {
        let specs = [AttributeSpec::new("a", 0.5, 1.0)];
        assert!(matches!(
            classify_term(&sv(&[("b", 0.5)]), &specs),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn overlap_cases() {
        let p = penalty(&[("x", 0.3)]);
        let prev = sv(&[("x", 0.5)]);
        let (zero, _) = overlap_penalty(&prev, &prev, &p, &set(&["x"])).unwrap();
        assert_eq!(zero, 0.0);
        let (up, shifts) = overlap_penalty(&sv(&[("x", 0.7)]), &prev, &p, &set(&["x"])).unwrap();
        let (down, _) = overlap_penalty(&sv(&[("x", 0.3)]), &prev, &p, &set(&["x"])).unwrap();
        assert!((up - 0.06).abs() < 1e-12);
        assert!((up - down).abs() < 1e-12);
        assert!((shifts["x"] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn overlap_requires_beta() {
        let prev = sv(&[("x", 0.5)]);
        assert!(matches!(
            overlap_penalty(&prev, &prev, &penalty(&[]), &set(&["x"])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn total_is_sum() {
        let specs = [
            AttributeSpec::new("a", 0.5, 1.0),
            AttributeSpec::new("b", 0.5, 0.5),
            AttributeSpec::new("x", 0.5, 1.0).with_role(AttributeRole::StabilityConstrained),
        ];
        let prev = sv(&[("a", 0.5), ("b", 0.5), ("x", 0.5)]);
        let cur = sv(&[("a", 0.7), ("b", 0.4), ("x", 0.7)]);
        let e = total_energy(&cur, Some(&prev), &specs, &penalty(&[("x", 0.3)]), &set(&["x"])).unwrap();
        assert!((e.total - 0.31).abs() < 1e-12);
        assert_eq!(e.total, e.classify_term + e.overlap_term);

        let first = total_energy(&cur, None, &specs, &penalty(&[("x", 0.3)]), &set(&["x"])).unwrap();
        assert_eq!(first.overlap_term, 0.0);
        assert!(first.shifts.is_empty());

        let perfect = total_energy(&prev, Some(&prev), &specs, &penalty(&[("x", 0.3)]), &set(&["x"])).unwrap();
        assert_eq!(perfect.total, 0.0);
    }
}
