use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use proptest::prelude::*;

use ctg_core::backends::{synthetic_rewrite, SubstitutionEntry, SubstitutionTable};
use ctg_core::correlation::PenaltyConfig;
use ctg_core::correlation::{derive_betas, pearson_matrix, CorrelationMatrix, ScoreSampleMatrix};
use ctg_core::energy::total_energy;
use ctg_core::fusion::{
    fuse_distributions, kl_divergence, weighted_kl_objective, AttributePriorSet, TokenDistribution, Vocabulary,
};
use ctg_core::metrics::{average_abs_bias, distinct_n, drift};
use ctg_core::optimizer::{Direction, Intensity, RewriteDirective};
use ctg_core::scoring::{
    expected_calibration_error, fit_temperature, select_anchor, AttributeDescriptor, AttributeScorer, AttributeSpec,
    LexiconScorer, ScoreVector,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab(n: usize) -> Arc<Vocabulary> {
    Arc::new(Vocabulary::synthetic(n).unwrap())
}

fn prior_set(v: usize, weights: &[Vec<f64>], lambdas: &[f64]) -> AttributePriorSet {
    let voc = vocab(v);
    let priors = weights
        .iter()
        .map(|w| TokenDistribution::from_weights(Arc::clone(&voc), w[..v].to_vec()).unwrap())
        .collect();
    AttributePriorSet::new(priors, lambdas.to_vec()).unwrap()
}

/// (vocab size, prior weights, lambdas)
fn instance(min_mass: f64) -> impl Strategy<Value = (usize, Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..=8, 1usize..=4).prop_flat_map(move |(v, n)| {
        (
            Just(v),
            prop::collection::vec(prop::collection::vec(min_mass..1.0, v), n),
            prop::collection::vec(0.05f64..5.0, n),
        )
    })
}

fn naive_fusion(v: usize, weights: &[Vec<f64>], lambdas: &[f64]) -> Vec<f64> {
    let total: f64 = lambdas.iter().sum();
    let normalized: Vec<Vec<f64>> = weights
        .iter()
        .map(|w| {
            let s: f64 = w[..v].iter().sum();
            w[..v].iter().map(|x| x / s).collect()
        })
        .collect();
    let raw: Vec<f64> = (0..v)
        .map(|x| {
            normalized
                .iter()
                .zip(lambdas)
                .map(|(q, l)| q[x].powf(l / total))
                .product()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|r| r / z).collect()
}

fn sv(pairs: &BTreeMap<String, f64>) -> ScoreVector {
    ScoreVector::new(pairs.clone(), "x").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fusion_matches_naive_product((v, w, l) in instance(1e-3)) {
        let fused = fuse_distributions(&prior_set(v, &w, &l)).unwrap();
        let oracle = naive_fusion(v, &w, &l);
        for (a, b) in fused.probs().iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fusion_is_normalized((v, w, l) in instance(0.0)) {
        let fused = fuse_distributions(&prior_set(v, &w, &l)).unwrap();
        prop_assert!((fused.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fusion_lambda_scale_invariant((v, w, l) in instance(1e-3), c in 0.01f64..100.0) {
        let a = fuse_distributions(&prior_set(v, &w, &l)).unwrap();
        let scaled: Vec<f64> = l.iter().map(|x| x * c).collect();
        let b = fuse_distributions(&prior_set(v, &w, &scaled)).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_objective_minimizer((v, w, l) in instance(1e-3), seed in any::<u64>()) {
        use rand::Rng;
        let set = prior_set(v, &w, &l);
        let star = fuse_distributions(&set).unwrap();
        let best = weighted_kl_objective(&star, &set).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let dir: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = dir.iter().sum::<f64>() / v as f64;
            let dir: Vec<f64> = dir.iter().map(|d| d - mean).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            // Largest step that stays inside the simplex, capped at 0.5.
            let limit = dir
                .iter()
                .zip(star.probs())
                .filter(|(d, _)| **d < 0.0)
                .map(|(d, p)| p / -d)
                .fold(0.5 / norm, f64::min);
            let t = rng.gen_range(0.0..1.0) * limit;
            if t * norm < 1e-3 {
                continue;
            }
            let p: Vec<f64> = star.probs().iter().zip(&dir).map(|(p, d)| (p + t * d).max(0.0)).collect();
            let perturbed = TokenDistribution::from_weights(Arc::clone(star.vocab()), p).unwrap();
            prop_assert!(weighted_kl_objective(&perturbed, &set).unwrap() >= best - 1e-9);
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_on_identity((v, w, _l) in instance(0.0)) {
        let set = prior_set(v, &w, &vec![1.0; w.len()]);
        let p = &set.priors()[0];
        prop_assert!(kl_divergence(p, p).unwrap().abs() < 1e-9);
        for q in set.priors() {
            prop_assert!(kl_divergence(p, q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn pearson_symmetric_and_bounded(rows in 3usize..=50, dims in 2usize..=17, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..rows).map(|_| (0..dims).map(|_| rng.gen::<f64>()).collect()).collect();
        let names: Vec<String> = (0..dims).map(|d| format!("d{d}")).collect();
        let m = pearson_matrix(&ScoreSampleMatrix::new(names, data).unwrap()).unwrap();
        for i in 0..dims {
            prop_assert_eq!(m.rho[i][i], 1.0);
            for j in 0..dims {
                prop_assert_eq!(m.rho[i][j], m.rho[j][i]);
                prop_assert!((-1.0..=1.0).contains(&m.rho[i][j]));
            }
        }
    }

    #[test]
    fn betas_scale_invariant_and_monotone(
        row in prop::collection::vec(0.01f64..1.0, 2..8),
        k in 0.05f64..1.0,
        c in 0.1f64..1.0,
    ) {
        let matrix = |r: &[f64]| target_row_matrix(r);
        let base = derive_betas(&matrix(&row), "t", c).unwrap();
        let scaled: Vec<f64> = row.iter().map(|x| x * k).collect();
        let other = derive_betas(&matrix(&scaled), "t", c).unwrap();
        let mut max_beta: f64 = 0.0;
        for (j, rj) in row.iter().enumerate() {
            let id = format!("d{j}");
            let bj = base.beta(&id).unwrap();
            prop_assert!((bj - other.beta(&id).unwrap()).abs() < 1e-12);
            max_beta = max_beta.max(bj);
            for (k2, rk) in row.iter().enumerate() {
                let other_id = format!("d{k2}");
                if rj >= rk {
                    prop_assert!(bj >= base.beta(&other_id).unwrap());
                }
            }
        }
        prop_assert!((max_beta - c).abs() < 1e-12);
    }

    #[test]
    fn ece_single_bin_is_mean_gap(pairs in prop::collection::vec((0.0f64..=1.0, 0u8..=1), 1..200)) {
        let probs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let n = probs.len() as f64;
        let gap = (probs.iter().sum::<f64>() / n - labels.iter().map(|&l| f64::from(l)).sum::<f64>() / n).abs();
        prop_assert!((expected_calibration_error(&probs, &labels, 1).unwrap() - gap).abs() < 1e-12);
    }

    #[test]
    fn temperature_ignores_sample_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs: Vec<(f64, u8)> = (0..300)
            .map(|_| {
                let z: f64 = rng.gen_range(-3.0..3.0);
                let y = u8::from(rng.gen::<f64>() < 1.0 / (1.0 + (-z).exp()));
                (2.0 * z, y)
            })
            .collect();
        let (l1, y1): (Vec<f64>, Vec<u8>) = pairs.iter().copied().unzip();
        pairs.shuffle(&mut rng);
        let (l2, y2): (Vec<f64>, Vec<u8>) = pairs.iter().copied().unzip();
        let a = fit_temperature(&l1, &y1).unwrap().temperature;
        let b = fit_temperature(&l2, &y2).unwrap().temperature;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn anchor_matches_exhaustive_search(
        target in prop::collection::vec(-1.0f64..1.0, 3),
        stock in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..=20),
    ) {
        prop_assume!(target.iter().any(|x| x.abs() > 1e-3));
        prop_assume!(stock.iter().all(|s| s.iter().any(|x| x.abs() > 1e-3)));
        let new_attr = AttributeDescriptor::normalized("new", target).unwrap();
        let descriptors: Vec<AttributeDescriptor> = stock
            .iter()
            .enumerate()
            .map(|(i, s)| AttributeDescriptor::normalized(format!("s{i:02}"), s.clone()).unwrap())
            .collect();
        let mut best: Option<(f64, String)> = None;
        for d in &descriptors {
            let dot: f64 = d.embedding.iter().zip(&new_attr.embedding).map(|(a, b)| a * b).sum();
            let better = match &best {
                None => true,
                Some((b, id)) => dot > *b || (dot == *b && d.id < *id),
            };
            if better {
                best = Some((dot, d.id.clone()));
            }
        }
        prop_assert_eq!(select_anchor(&new_attr, &descriptors).unwrap(), best.unwrap().1);
    }

    #[test]
    fn lexicon_score_never_drops_on_positive_append(
        words in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "joy", "glad"]), 0..30),
        term in prop::sample::select(vec!["joy", "glad"]),
    ) {
        // Unit weights: the appended weight is never below the running mean.
        let lexicon: HashMap<String, f64> = [("joy".to_string(), 1.0), ("glad".to_string(), 1.0)].into();
        let scorer = LexiconScorer::new(lexicon, 4.0).unwrap();
        let text = words.join(" ");
        let before = scorer.score(&text).score;
        let after = scorer.score(&format!("{text} {term}")).score;
        prop_assert!(after >= before);
        prop_assert!((0.0..=1.0).contains(&after));
    }

    #[test]
    fn synthetic_rewrite_follows_directives(
        fillers in 3usize..12,
        seed in any::<u64>(),
        significant in any::<bool>(),
    ) {
        let table = SubstitutionTable {
            entries: [
                ("joy".to_string(), SubstitutionEntry { insert: vec!["glad".into()], remove: vec!["glad".into()] }),
                ("fear".to_string(), SubstitutionEntry { insert: vec!["afraid".into()], remove: vec!["afraid".into()] }),
            ]
            .into(),
            fillers: vec!["then".into()],
        };
        let source = format!("{} afraid.", vec!["then"; fillers].join(" "));
        let intensity = if significant { Intensity::Significant } else { Intensity::Slight };
        let directives = vec![
            RewriteDirective::adjust("joy", Direction::Increase, intensity),
            RewriteDirective::maintain("fear"),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = synthetic_rewrite(&source, &directives, &table, seed, 0.0, &mut rng).unwrap();
        let again = synthetic_rewrite(&source, &directives, &table, seed, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&out, &again);
        let score = |id: &str, text: &str| {
            let lex: HashMap<String, f64> = table.entries[id].insert.iter().map(|t| (t.clone(), 1.0)).collect();
            LexiconScorer::new(lex, 4.0).unwrap().score(text).score
        };
        prop_assert!(score("joy", &out) > score("joy", &source));
        prop_assert_eq!(score("fear", &out), score("fear", &source));
    }

    #[test]
    fn energy_additive_and_monotone(
        devs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.1f64..3.0), 1..5),
        shifts in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.05f64..1.0), 0..4),
        bump_index in any::<prop::sample::Index>(),
    ) {
        let mut specs = Vec::new();
        let mut cur = BTreeMap::new();
        let mut prev = BTreeMap::new();
        let mut betas = BTreeMap::new();
        let mut constrained = BTreeSet::new();
        let mut expected = 0.0;
        for (i, (score, target, alpha)) in devs.iter().enumerate() {
            let id = format!("p{i}");
            specs.push(AttributeSpec::new(id.clone(), *target, *alpha));
            cur.insert(id.clone(), *score);
            prev.insert(id, *score);
            expected += alpha * (score - target).abs();
        }
        for (j, (a, b, beta)) in shifts.iter().enumerate() {
            let id = format!("s{j}");
            specs.push(AttributeSpec::new(id.clone(), 0.5, 1.0).with_role(ctg_core::scoring::AttributeRole::StabilityConstrained));
            cur.insert(id.clone(), *a);
            prev.insert(id.clone(), *b);
            betas.insert(id.clone(), *beta);
            constrained.insert(id);
            expected += beta * (a - b).abs();
        }
        let penalty = PenaltyConfig { c: 0.3, betas, target_dims: vec![], fallback_dims: vec![] };
        let e = total_energy(&sv(&cur), Some(&sv(&prev)), &specs, &penalty, &constrained).unwrap();
        prop_assert!(e.total >= 0.0);
        prop_assert!((e.total - expected).abs() < 1e-12);
        prop_assert_eq!(e.total, e.classify_term + e.overlap_term);
        let again = total_energy(&sv(&cur), Some(&sv(&prev)), &specs, &penalty, &constrained).unwrap();
        prop_assert_eq!(&e, &again);

        // Push one primary score further from its target.
        let i = bump_index.index(devs.len());
        let (score, target, _) = devs[i];
        let further = if score >= target { (score + 0.01).min(1.0) } else { (score - 0.01).max(0.0) };
        prop_assume!((further - target).abs() > (score - target).abs());
        let mut bumped = cur.clone();
        bumped.insert(format!("p{i}"), further);
        let e2 = total_energy(&sv(&bumped), Some(&sv(&prev)), &specs, &penalty, &constrained).unwrap();
        prop_assert!(e2.total > e.total);
    }

    #[test]
    fn distinct_in_unit_interval(tokens in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..40), n in 1usize..4) {
        prop_assume!(tokens.len() >= n);
        let d = distinct_n(&tokens, n).unwrap();
        prop_assert!(d > 0.0 && d <= 1.0);
        let all_unique = tokens.windows(n).collect::<BTreeSet<_>>().len() == tokens.len() - n + 1;
        prop_assert_eq!(d == 1.0, all_unique);
    }

    #[test]
    fn metrics_ignore_other_dims(
        targets in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..4),
        others in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..4),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut specs = Vec::new();
        let mut cur = BTreeMap::new();
        let mut base = BTreeMap::new();
        let mut target_ids = BTreeSet::new();
        for (i, (s, t)) in targets.iter().enumerate() {
            let id = format!("t{i}");
            specs.push(AttributeSpec::new(id.clone(), *t, 1.0));
            cur.insert(id.clone(), *s);
            base.insert(id.clone(), *t);
            target_ids.insert(id);
        }
        for (j, (a, b)) in others.iter().enumerate() {
            cur.insert(format!("o{j}"), *a);
            base.insert(format!("o{j}"), *b);
        }
        let bias = average_abs_bias(&sv(&cur), &specs, &target_ids).unwrap();
        let d = drift(&sv(&cur), &sv(&base), &target_ids).unwrap();

        // Permute the non-target scores among themselves: bias unchanged.
        let mut vals: Vec<f64> = others.iter().map(|o| o.0).collect();
        vals.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let mut permuted = cur.clone();
        for (j, v) in vals.iter().enumerate() {
            permuted.insert(format!("o{j}"), *v);
        }
        prop_assert_eq!(average_abs_bias(&sv(&permuted), &specs, &target_ids).unwrap(), bias);

        // Arbitrary target scores: drift unchanged.
        let mut retargeted = cur.clone();
        for id in &target_ids {
            retargeted.insert(id.clone(), 0.123);
        }
        prop_assert_eq!(drift(&sv(&retargeted), &sv(&base), &target_ids).unwrap(), d);

        let spec_order: Vec<AttributeSpec> = specs.iter().rev().cloned().collect();
        prop_assert!((average_abs_bias(&sv(&cur), &spec_order, &target_ids).unwrap() - bias).abs() < 1e-15);
    }
}

fn target_row_matrix(row: &[f64]) -> CorrelationMatrix {
    let n = row.len() + 1;
    let mut dims = vec!["t".to_string()];
    dims.extend((0..row.len()).map(|j| format!("d{j}")));
    let mut rho = vec![vec![0.0; n]; n];
    for (i, r) in rho.iter_mut().enumerate() {
        r[i] = 1.0;
    }
    for (j, r) in row.iter().enumerate() {
        rho[0][j + 1] = *r;
        rho[j + 1][0] = *r;
    }
    CorrelationMatrix {
        dims,
        rho,
        degenerate: vec![],
    }
}
