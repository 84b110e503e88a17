//! Mask-kind comparisons across worlds and seeds.
//!
//! Per (world, seed) one classifier and at most two denoisers are trained:
//! a hard-mask model, shared by the hard and soft cells, and a no-mask model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, ClassifierConfig, ClassifierTrainConfig, TaskClassifier};
use crate::error::{Error, Result};
use crate::mask::MaskKind;
use crate::metrics::{score_plans, PlanScores};
use crate::planner::{make_queries, PlannerModel, Sampler};
use crate::trainer::{layout_for, train_diffusion, TrainConfig};
use crate::world::{generate_world, sample_dataset, split_dataset, PlanInstance, PlanLayout, Protocol, World, WorldSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub worlds: Vec<WorldSpec>,
    pub kinds: Vec<MaskKind>,
    pub seeds: Vec<u64>,
    /// Approximate number of training instances per world.
    pub train_instances: usize,
    pub split_ratio: f64,
    pub train: TrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub sampler: Sampler,
    pub eval_batch: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            worlds: vec![WorldSpec::default()],
            kinds: vec![MaskKind::Hard, MaskKind::None, MaskKind::Soft],
            seeds: (0..5).collect(),
            train_instances: 5000,
            split_ratio: 0.7,
            train: TrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            sampler: Sampler::Ddpm,
            eval_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub world: usize,
    pub action_dim: usize,
    pub kind: MaskKind,
    pub seed: u64,
    pub scores: PlanScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub world: usize,
    pub action_dim: usize,
    /// Mean SR per mask kind over seeds.
    pub mean_sr: BTreeMap<MaskKind, f64>,
    /// Mean hard minus mean none, when both were run.
    pub gap_hard_none: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub summary: Vec<WorldSummary>,
}

/// Number of videos giving roughly `target` training windows.
pub fn videos_for(spec: &WorldSpec, target: usize, ratio: f64) -> usize {
    let video_len = match &spec.plans {
        PlanLayout::Random { video_len, .. } => *video_len,
        PlanLayout::Explicit { plans } => plans
            .iter()
            .flatten()
            .map(|p| p.actions.len())
            .min()
            .unwrap_or(spec.horizon),
    };
    let windows = video_len + 1 - spec.horizon.min(video_len);
    ((target as f64 / windows as f64 / ratio).ceil() as usize).max(2)
}

/// World, train split and test split for one seed.
pub fn prepare(spec: &WorldSpec, seed: u64, train_instances: usize, ratio: f64) -> Result<(World, Vec<PlanInstance>, Vec<PlanInstance>)> {
    let spec = WorldSpec {
        seed,
        ..spec.clone()
    };
    let world = generate_world(&spec)?;
    let n = videos_for(&spec, train_instances, ratio);
    let data = sample_dataset(&world, n, Protocol::SlidingWindow, seed)?;
    let (train, test) = split_dataset(&data, ratio, seed)?;
    Ok((world, train, test))
}

pub fn evaluate(
    model: &PlannerModel,
    classifier: Option<&TaskClassifier>,
    test: &[PlanInstance],
    kind: MaskKind,
    sampler: Sampler,
    seed: u64,
    batch: usize,
) -> Result<PlanScores> {
    let qs = make_queries(model, test, classifier, kind)?;
    let out = model.sample_all(&qs, sampler, seed, 0, batch)?;
    let pred: Vec<Vec<usize>> = out.into_iter().map(|s| s.actions).collect();
    let gt: Vec<Vec<usize>> = test.iter().map(|i| i.actions.clone()).collect();
    score_plans(&pred, &gt)
}

pub fn summarize(cells: &[AblationCell], num_worlds: usize) -> Vec<WorldSummary> {
    (0..num_worlds)
        .filter_map(|w| {
            let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.world == w).collect();
            let action_dim = mine.first()?.action_dim;
            let mut sums: BTreeMap<MaskKind, (f64, usize)> = BTreeMap::new();
            for c in &mine {
                let e = sums.entry(c.kind).or_default();
                e.0 += c.scores.sr;
                e.1 += 1;
            }
            let mean_sr: BTreeMap<MaskKind, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
            let gap_hard_none = match (mean_sr.get(&MaskKind::Hard), mean_sr.get(&MaskKind::None)) {
                (Some(h), Some(n)) => Some(h - n),
                _ => None,
            };
            Some(WorldSummary {
                world: w,
                action_dim,
                mean_sr,
                gap_hard_none,
            })
        })
        .collect()
}

/// Trains and scores every (world, seed, kind) cell. `progress` is called
/// after each cell.
pub fn run_ablation(cfg: &AblationConfig, mut progress: impl FnMut(&AblationCell)) -> Result<AblationReport> {
    if cfg.worlds.is_empty() || cfg.kinds.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs worlds, mask kinds and seeds".into()));
    }
    let mut cells = Vec::new();
    for (wi, spec) in cfg.worlds.iter().enumerate() {
        for &seed in &cfg.seeds {
            let (world, train, test) = prepare(spec, seed, cfg.train_instances, cfg.split_ratio)?;
            let mut clf = TaskClassifier::new(
                ClassifierConfig::mlp(world.num_tasks(), world.obs_dim(), world.spec.visual_dim),
                seed,
            )?;
            train_classifier(
                &mut clf,
                &train,
                &ClassifierTrainConfig {
                    seed,
                    ..cfg.classifier.clone()
                },
            )?;
            let layout = layout_for(&train, world.num_tasks(), world.num_actions)?;
            let mut models: BTreeMap<MaskKind, PlannerModel> = BTreeMap::new();
            for &kind in &cfg.kinds {
                let train_kind = if kind == MaskKind::None { MaskKind::None } else { MaskKind::Hard };
                if !models.contains_key(&train_kind) {
                    let tc = TrainConfig {
                        mask: train_kind,
                        seed,
                        ..cfg.train.clone()
                    };
                    let (m, _) = train_diffusion(&train, layout, &tc, None)?;
                    models.insert(train_kind, m);
                }
                let scores = evaluate(&models[&train_kind], Some(&clf), &test, kind, cfg.sampler, seed, cfg.eval_batch)?;
                let cell = AblationCell {
                    world: wi,
                    action_dim: world.num_actions,
                    kind,
                    seed,
                    scores,
                };
                progress(&cell);
                cells.push(cell);
            }
        }
    }
    let summary = summarize(&cells, cfg.worlds.len());
    Ok(AblationReport { cells, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::LrSchedule;
    use crate::unet::UNetConfig;
    use crate::world::ActionLayout;

    #[test]
    fn video_count_targets_training_windows() {
        let spec = WorldSpec::default();
        assert_eq!(videos_for(&spec, 5000, 0.7), 1786);
    }

    #[test]
    fn shared_action_world_gives_equal_hard_and_none_masks() {
        // Every task may use every action, so the hard masks are all ones.
        let spec = WorldSpec {
            num_tasks: 2,
            actions: ActionLayout::Shared { num_actions: 4 },
            plans: PlanLayout::Random {
                per_task: 2,
                video_len: 4,
                weight_decay: 1.0,
            },
            ..WorldSpec::default()
        };
        let cfg = AblationConfig {
            worlds: vec![spec],
            kinds: vec![MaskKind::Hard, MaskKind::None],
            seeds: vec![0],
            train_instances: 60,
            train: TrainConfig {
                steps: 30,
                batch_size: 8,
                diffusion_steps: 5,
                lr: LrSchedule::constant(1e-3),
                unet: UNetConfig {
                    channels: [4, 8, 8],
                    embed_dim: 4,
                    embed_hidden: 4,
                    norm_eps: 1e-5,
                },
                ..TrainConfig::default()
            },
            classifier: ClassifierTrainConfig {
                steps: 20,
                ..ClassifierTrainConfig::default()
            },
            sampler: Sampler::Deterministic,
            ..AblationConfig::default()
        };
        let mut seen = 0;
        let r = run_ablation(&cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        assert_eq!(r.cells.len(), 2);
        let (_, train, _) = prepare(&cfg.worlds[0], 0, 60, 0.7).unwrap();
        let m = crate::mask::build_task_masks(&train, 2, 4).unwrap();
        assert!(m.masks.iter().all(|k| k.weights.iter().all(|w| *w == 1.0)));
        assert!(r.summary[0].gap_hard_none.is_some());
    }
}
