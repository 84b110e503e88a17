//! Plan-level and distribution-level evaluation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::GroupKey;

/// Smoothing added to predicted probabilities inside logarithms.
pub const EPS_SMOOTH: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanScores {
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
    pub count: usize,
}

pub fn score_plans(pred: &[Vec<usize>], gt: &[Vec<usize>]) -> Result<PlanScores> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground-truth plans",
            pred.len(),
            gt.len()
        )));
    }
    let (mut sr, mut acc, mut iou) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() || p.is_empty() {
            return Err(Error::Shape(format!(
                "horizon mismatch: predicted {} vs ground truth {}",
                p.len(),
                g.len()
            )));
        }
        let hits = p.iter().zip(g).filter(|(a, b)| a == b).count();
        if hits == p.len() {
            sr += 1.0;
        }
        acc += hits as f64 / p.len() as f64;
        let ps: BTreeSet<_> = p.iter().collect();
        let gs: BTreeSet<_> = g.iter().collect();
        iou += ps.intersection(&gs).count() as f64 / ps.union(&gs).count() as f64;
    }
    let n = pred.len() as f64;
    Ok(PlanScores {
        sr: sr / n,
        macc: acc / n,
        miou: iou / n,
        count: pred.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistScores {
    pub nll: f64,
    pub kl: f64,
    pub mode_prec: f64,
    pub mode_rec: f64,
    pub groups: usize,
    /// Groups with ground truth but no samples.
    pub skipped: usize,
}

/// Per-group scores plus their weight (the ground-truth multiplicity).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub nll: f64,
    pub kl: f64,
    pub mode_prec: f64,
    pub mode_rec: f64,
    pub weight: usize,
}

pub fn score_group(samples: &[Vec<usize>], gt: &BTreeMap<Vec<usize>, usize>) -> Option<GroupScore> {
    let total: usize = gt.values().sum();
    if samples.is_empty() || total == 0 {
        return None;
    }
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.as_slice()).or_default() += 1;
    }
    let ns = samples.len() as f64;
    let (mut kl, mut nll, mut hit_modes) = (0.0, 0.0, 0);
    for (plan, &c) in gt {
        let g = c as f64 / total as f64;
        let k = counts.get(plan.as_slice()).copied().unwrap_or(0);
        let p = k as f64 / ns;
        kl += g * (g / (p + EPS_SMOOTH)).ln();
        nll -= g * (p + EPS_SMOOTH).ln();
        if k > 0 {
            hit_modes += 1;
        }
    }
    let in_modes = samples.iter().filter(|s| gt.contains_key(*s)).count();
    Some(GroupScore {
        nll: nll.max(0.0),
        kl: kl.max(0.0),
        mode_prec: in_modes as f64 / ns,
        mode_rec: hit_modes as f64 / gt.len() as f64,
        weight: total,
    })
}

/// Group-size-weighted means of the per-group probabilistic metrics.
pub fn score_distributions(
    samples: &BTreeMap<GroupKey, Vec<Vec<usize>>>,
    gt: &BTreeMap<GroupKey, BTreeMap<Vec<usize>, usize>>,
) -> Result<DistScores> {
    let (mut w, mut nll, mut kl, mut mp, mut mr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut groups, mut skipped) = (0, 0);
    for (key, modes) in gt {
        match samples.get(key).and_then(|s| score_group(s, modes)) {
            Some(g) => {
                let gw = g.weight as f64;
                w += gw;
                nll += gw * g.nll;
                kl += gw * g.kl;
                mp += gw * g.mode_prec;
                mr += gw * g.mode_rec;
                groups += 1;
            }
            None => skipped += 1,
        }
    }
    if groups == 0 {
        return Err(Error::Config("no group has both samples and ground truth".into()));
    }
    if skipped > 0 {
        log::warn!("{skipped} groups without samples were skipped");
    }
    Ok(DistScores {
        nll: nll / w,
        kl: kl / w,
        mode_prec: mp / w,
        mode_rec: mr / w,
        groups,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tool_version: String,
    pub config_hash: String,
    pub plans: PlanScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistScores>,
    /// Plan scores keyed by horizon.
    pub per_horizon: BTreeMap<usize, PlanScores>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub task: usize,
    pub first: usize,
    pub last: usize,
    #[serde(flatten)]
    pub score: GroupScore,
}

/// Scores of every group that has both samples and ground truth.
pub fn group_breakdown(
    samples: &BTreeMap<GroupKey, Vec<Vec<usize>>>,
    gt: &BTreeMap<GroupKey, BTreeMap<Vec<usize>, usize>>,
) -> Vec<GroupEntry> {
    gt.iter()
        .filter_map(|(&(task, first, last), modes)| {
            let score = score_group(samples.get(&(task, first, last))?, modes)?;
            Some(GroupEntry { task, first, last, score })
        })
        .collect()
}

pub fn per_horizon(pred: &[Vec<usize>], gt: &[Vec<usize>]) -> Result<BTreeMap<usize, PlanScores>> {
    let mut by: BTreeMap<usize, (Vec<Vec<usize>>, Vec<Vec<usize>>)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        let e = by.entry(g.len()).or_default();
        e.0.push(p.clone());
        e.1.push(g.clone());
    }
    by.into_iter()
        .map(|(h, (p, g))| Ok((h, score_plans(&p, &g)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn hand_fixtures() {
        let s = score_plans(&[vec![1, 2, 3]], &[vec![1, 2, 3]]).unwrap();
        assert_eq!((s.sr, s.macc, s.miou), (1.0, 1.0, 1.0));
        let s = score_plans(&[vec![1, 2, 4]], &[vec![1, 2, 3]]).unwrap();
        assert_eq!((s.sr, s.macc, s.miou), (0.0, 2.0 / 3.0, 0.5));
        let s = score_plans(&[vec![2, 1, 3]], &[vec![1, 2, 3]]).unwrap();
        assert_eq!((s.sr, s.macc, s.miou), (0.0, 1.0 / 3.0, 1.0));
        assert!(score_plans(&[vec![1, 2]], &[vec![1, 2, 3]]).is_err());
        assert!(score_plans(&[], &[]).is_err());
    }

    fn brute(pred: &[Vec<usize>], gt: &[Vec<usize>]) -> (f64, f64, f64) {
        let n = pred.len() as f64;
        let mut out = (0.0, 0.0, 0.0);
        for (p, g) in pred.iter().zip(gt) {
            let mut all = true;
            let mut hits = 0.0;
            for i in 0..p.len() {
                if p[i] == g[i] {
                    hits += 1.0;
                } else {
                    all = false;
                }
            }
            let mut universe: Vec<usize> = p.iter().chain(g).copied().collect();
            universe.sort();
            universe.dedup();
            let inter = universe.iter().filter(|a| p.contains(a) && g.contains(a)).count();
            out.0 += if all { 1.0 } else { 0.0 };
            out.1 += hits / p.len() as f64;
            out.2 += inter as f64 / universe.len() as f64;
        }
        (out.0 / n, out.1 / n, out.2 / n)
    }

    #[test]
    fn matches_brute_force_on_random_pairs() {
        let mut rng = seeded(12);
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for _ in 0..1000 {
            let t = rng.random_range(3..=6);
            pred.push((0..t).map(|_| rng.random_range(0..6)).collect::<Vec<usize>>());
            gt.push((0..t).map(|_| rng.random_range(0..6)).collect::<Vec<usize>>());
        }
        let s = score_plans(&pred, &gt).unwrap();
        let b = brute(&pred, &gt);
        assert!((s.sr - b.0).abs() < 1e-12);
        assert!((s.macc - b.1).abs() < 1e-12);
        assert!((s.miou - b.2).abs() < 1e-12);
    }

    fn gt_of(modes: &[(&[usize], usize)]) -> BTreeMap<Vec<usize>, usize> {
        modes.iter().map(|(p, c)| (p.to_vec(), *c)).collect()
    }

    #[test]
    fn closed_form_kl() {
        let gt = gt_of(&[(&[1, 2, 3], 1), (&[1, 4, 3], 1)]);
        let mut samples = vec![vec![1, 2, 3]; 9];
        samples.push(vec![1, 4, 3]);
        let g = score_group(&samples, &gt).unwrap();
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((g.kl - want).abs() < 1e-6);
        assert!((want - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn mode_coverage_examples() {
        let gt = gt_of(&[(&[1, 2, 3], 1), (&[1, 4, 3], 1)]);
        let g = score_group(&vec![vec![1, 2, 3]; 1500], &gt).unwrap();
        assert_eq!(g.mode_rec, 0.5);
        assert_eq!(g.mode_prec, 1.0);
        let g = score_group(&[vec![1, 2, 3], vec![1, 4, 3]], &gt).unwrap();
        assert!(g.kl.abs() < 1e-9);
        assert!(score_group(&[], &gt).is_none());
    }

    #[test]
    fn weighted_means_and_skips() {
        let mut gt = BTreeMap::new();
        gt.insert((0, 1, 3), gt_of(&[(&[1, 2, 3], 3)]));
        gt.insert((1, 5, 7), gt_of(&[(&[5, 6, 7], 1)]));
        gt.insert((2, 0, 0), gt_of(&[(&[0, 0, 0], 1)]));
        let mut s = BTreeMap::new();
        s.insert((0, 1, 3), vec![vec![1, 2, 3]]);
        s.insert((1, 5, 7), vec![vec![5, 5, 7]]);
        let d = score_distributions(&s, &gt).unwrap();
        assert_eq!(d.groups, 2);
        assert_eq!(d.skipped, 1);
        assert!((d.mode_prec - 0.75).abs() < 1e-12);
        assert!((d.mode_rec - 0.75).abs() < 1e-12);
    }

    #[test]
    fn kl_estimate_improves_with_more_samples() {
        // Frozen policy P = (0.7, 0.3) against G = (0.7, 0.3): the estimate
        // should move toward 0 as the sample count grows, on average.
        let gt = gt_of(&[(&[0, 1, 2], 7), (&[0, 3, 2], 3)]);
        let mean_kl = |n: usize| {
            let mut total = 0.0;
            for rep in 0..200 {
                let mut rng = seeded(1000 + rep);
                let s: Vec<Vec<usize>> = (0..n)
                    .map(|_| if rng.random::<f64>() < 0.7 { vec![0, 1, 2] } else { vec![0, 3, 2] })
                    .collect();
                total += score_group(&s, &gt).unwrap().kl;
            }
            total / 200.0
        };
        assert!(mean_kl(1500) < mean_kl(100));
    }

    proptest! {
        #[test]
        fn metric_bounds(pairs in prop::collection::vec(
            (3usize..7).prop_flat_map(|t| (prop::collection::vec(0usize..5, t), prop::collection::vec(0usize..5, t))),
            1..30,
        )) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let s = score_plans(&p, &g).unwrap();
            prop_assert!(s.sr <= s.macc + 1e-12);
            prop_assert!(s.macc <= 1.0 && s.miou <= 1.0 && s.miou >= 0.0 && s.sr >= 0.0);
        }

        #[test]
        fn distribution_metrics_are_non_negative(
            samples in prop::collection::vec(prop::collection::vec(0usize..3, 3), 1..50),
            modes in prop::collection::btree_map(prop::collection::vec(0usize..3, 3), 1usize..5, 1..4),
        ) {
            let g = score_group(&samples, &modes).unwrap();
            prop_assert!(g.kl >= 0.0 && g.nll >= 0.0);
            prop_assert!((0.0..=1.0).contains(&g.mode_prec) && (0.0..=1.0).contains(&g.mode_rec));
        }
    }
}
