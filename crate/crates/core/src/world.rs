//! Synthetic procedure-planning worlds.
//!
//! A world owns a set of tasks, each with a subset of action types and a
//! small table of admissible orderings ("videos"). Plan instances are
//! length-`T` windows of sampled videos; their start/goal observations are
//! noisy embeddings of the boundary actions, made of a visual channel and a
//! caption-text channel.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::value;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream_rng};

const VERBS: &[&str] = &[
    "pour", "open", "close", "cut", "add", "stir", "remove", "place", "tighten", "wash", "peel",
    "spread", "fold", "press", "attach", "fill",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionLayout {
    /// Every task owns `per_task` actions nobody else uses.
    Disjoint { per_task: usize },
    /// Tasks sit on a ring; neighbours share `shared` actions.
    Overlapping { per_task: usize, shared: usize },
    /// Every task may use all `num_actions` actions.
    Shared { num_actions: usize },
    Explicit { subsets: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanVariant {
    pub actions: Vec<usize>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanLayout {
    /// `per_task` distinct orderings of `video_len` distinct task actions.
    /// Variant `i` has sampling weight proportional to `weight_decay^i`.
    Random {
        per_task: usize,
        video_len: usize,
        weight_decay: f64,
    },
    Explicit { plans: Vec<Vec<PlanVariant>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionSpec {
    /// Scale of the task-keyword component relative to the unit-norm action
    /// keyword component.
    pub task_scale: f64,
    /// Per-coordinate caption noise.
    pub noise: f64,
    /// Number of distinct verbs; actions cycle through them.
    pub num_verbs: usize,
}

impl Default for CaptionSpec {
    fn default() -> Self {
        Self {
            task_scale: 0.3,
            noise: 0.05,
            num_verbs: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub num_tasks: usize,
    pub actions: ActionLayout,
    pub plans: PlanLayout,
    pub horizon: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    /// Per-coordinate Gaussian noise added to every observation.
    pub obs_noise: f64,
    /// Norm of the task component of the visual channel.
    pub task_visual_scale: f64,
    pub caption: CaptionSpec,
    pub seed: u64,
}

impl Default for WorldSpec {
    /// The standard desk-scale world: 10 tasks with 6 disjoint actions each,
    /// horizon 3, two orderings per task.
    fn default() -> Self {
        Self {
            num_tasks: 10,
            actions: ActionLayout::Disjoint { per_task: 6 },
            plans: PlanLayout::Random {
                per_task: 2,
                video_len: 6,
                weight_decay: 1.0,
            },
            horizon: 3,
            visual_dim: 64,
            text_dim: 32,
            obs_noise: 0.2,
            task_visual_scale: 0.5,
            caption: CaptionSpec::default(),
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn obs_dim(&self) -> usize {
        self.visual_dim + self.text_dim
    }

    fn per_task(&self) -> usize {
        match &self.actions {
            ActionLayout::Disjoint { per_task } | ActionLayout::Overlapping { per_task, .. } => *per_task,
            ActionLayout::Shared { num_actions } => *num_actions,
            ActionLayout::Explicit { subsets } => subsets.iter().map(Vec::len).max().unwrap_or(0),
        }
    }

    /// Sets one field from a config assignment. `actions` switches the
    /// layout kind and keeps the current per-task action count.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let wrong = |what: &str| Error::Config(format!("{key} does not apply to {what}"));
        match key {
            "num_tasks" | "tasks" => self.num_tasks = value(key, v)?,
            "horizon" => self.horizon = value(key, v)?,
            "visual_dim" => self.visual_dim = value(key, v)?,
            "text_dim" => self.text_dim = value(key, v)?,
            "obs_noise" => self.obs_noise = value(key, v)?,
            "task_visual_scale" => self.task_visual_scale = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "caption_task_scale" => self.caption.task_scale = value(key, v)?,
            "caption_noise" => self.caption.noise = value(key, v)?,
            "num_verbs" => self.caption.num_verbs = value(key, v)?,
            "actions" => {
                let per_task = self.per_task();
                self.actions = match v {
                    "disjoint" => ActionLayout::Disjoint { per_task },
                    "overlapping" => ActionLayout::Overlapping { per_task, shared: 1 },
                    "shared" => ActionLayout::Shared {
                        num_actions: per_task * self.num_tasks,
                    },
                    other => return Err(Error::Config(format!("unknown action layout {other:?}"))),
                }
            }
            "per_task" | "actions_per_task" => match &mut self.actions {
                ActionLayout::Disjoint { per_task } | ActionLayout::Overlapping { per_task, .. } => {
                    *per_task = value(key, v)?
                }
                _ => return Err(wrong("this action layout")),
            },
            "shared" => match &mut self.actions {
                ActionLayout::Overlapping { shared, .. } => *shared = value(key, v)?,
                _ => return Err(wrong("non-overlapping layouts")),
            },
            "num_actions" => match &mut self.actions {
                ActionLayout::Shared { num_actions } => *num_actions = value(key, v)?,
                _ => return Err(wrong("non-shared layouts")),
            },
            "plans_per_task" | "video_len" | "weight_decay" => match &mut self.plans {
                PlanLayout::Random {
                    per_task,
                    video_len,
                    weight_decay,
                } => match key {
                    "plans_per_task" => *per_task = value(key, v)?,
                    "video_len" => *video_len = value(key, v)?,
                    _ => *weight_decay = value(key, v)?,
                },
                PlanLayout::Explicit { .. } => return Err(wrong("explicit plan tables")),
            },
            other => return Err(Error::Config(format!("unknown world key {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: WorldSpec,
    pub num_actions: usize,
    /// Sorted action ids per task.
    pub task_actions: Vec<Vec<usize>>,
    /// Admissible orderings per task, weights normalised to 1.
    pub plans: Vec<Vec<PlanVariant>>,
    pub action_visual: Vec<Vec<f64>>,
    pub task_visual: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// `(task, first action, last action)`.
pub type GroupKey = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanInstance {
    pub task: usize,
    pub actions: Vec<usize>,
    #[serde(default)]
    pub obs_start: Vec<f64>,
    #[serde(default)]
    pub obs_goal: Vec<f64>,
    #[serde(default)]
    pub video_id: usize,
    #[serde(default)]
    pub window_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl PlanInstance {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn group_key(&self) -> GroupKey {
        (
            self.task,
            *self.actions.first().unwrap_or(&0),
            *self.actions.last().unwrap_or(&0),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub keywords: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Every length-`T` window of every video.
    #[serde(alias = "sliding")]
    SlidingWindow,
    /// One uniformly chosen window per video.
    OnePerVideo,
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn task_subsets(spec: &WorldSpec) -> Result<(usize, Vec<Vec<usize>>)> {
    let k = spec.num_tasks;
    let subsets: Vec<Vec<usize>> = match &spec.actions {
        ActionLayout::Disjoint { per_task } => (0..k)
            .map(|t| (t * per_task..(t + 1) * per_task).collect())
            .collect(),
        ActionLayout::Overlapping { per_task, shared } => {
            if shared >= per_task {
                return Err(Error::Config(format!(
                    "shared actions ({shared}) must be fewer than per-task actions ({per_task})"
                )));
            }
            let stride = per_task - shared;
            let total = k * stride;
            (0..k)
                .map(|t| {
                    let mut s: Vec<usize> = (0..*per_task).map(|i| (t * stride + i) % total).collect();
                    s.sort_unstable();
                    s.dedup();
                    s
                })
                .collect()
        }
        ActionLayout::Shared { num_actions } => (0..k).map(|_| (0..*num_actions).collect()).collect(),
        ActionLayout::Explicit { subsets } => {
            if subsets.len() != k {
                return Err(Error::Config(format!(
                    "{} explicit subsets for {k} tasks",
                    subsets.len()
                )));
            }
            subsets
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.sort_unstable();
                    s.dedup();
                    s
                })
                .collect()
        }
    };
    let union: BTreeSet<usize> = subsets.iter().flatten().copied().collect();
    let num_actions = union.iter().next_back().map(|m| m + 1).unwrap_or(0);
    if union.len() != num_actions || num_actions == 0 {
        return Err(Error::Config(
            "task action subsets must cover action ids 0..L_a without gaps".into(),
        ));
    }
    Ok((num_actions, subsets))
}

fn random_plans<R: Rng>(
    actions: &[usize],
    task: usize,
    per_task: usize,
    video_len: usize,
    weight_decay: f64,
    rng: &mut R,
) -> Result<Vec<PlanVariant>> {
    if actions.len() < video_len {
        return Err(Error::InsufficientActions {
            task,
            available: actions.len(),
            required: video_len,
        });
    }
    let mut pool = actions.to_vec();
    pool.shuffle(rng);
    let base: Vec<usize> = pool[..video_len].to_vec();
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut orders = vec![base.clone()];
    seen.insert(base.clone());
    let mut attempts = 0;
    while orders.len() < per_task && attempts < 1000 {
        attempts += 1;
        // Variants differ from the base by one adjacent swap, which keeps
        // them related the way alternative real-world procedures are.
        let mut v = base.clone();
        if attempts < 200 {
            let p = rng.random_range(0..video_len - 1);
            v.swap(p, p + 1);
        } else {
            v.shuffle(rng);
        }
        if seen.insert(v.clone()) {
            orders.push(v);
        }
    }
    if orders.len() < per_task {
        return Err(Error::Config(format!(
            "task {task}: could not build {per_task} distinct orderings of length {video_len}"
        )));
    }
    let raw: Vec<f64> = (0..per_task).map(|i| weight_decay.powi(i as i32)).collect();
    let z: f64 = raw.iter().sum();
    Ok(orders
        .into_iter()
        .zip(raw)
        .map(|(actions, w)| PlanVariant {
            actions,
            weight: w / z,
        })
        .collect())
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    if spec.num_tasks == 0 || spec.visual_dim == 0 {
        return Err(Error::Config("task count and visual dim must be positive".into()));
    }
    if spec.horizon < 2 {
        return Err(Error::Config(format!("horizon {} < 2", spec.horizon)));
    }
    if spec.obs_noise < 0.0 || spec.caption.noise < 0.0 || spec.caption.num_verbs == 0 {
        return Err(Error::Config("noise scales must be non-negative".into()));
    }
    let (num_actions, task_actions) = task_subsets(spec)?;
    let mut rng = seeded(spec.seed);
    let plans: Vec<Vec<PlanVariant>> = match &spec.plans {
        PlanLayout::Random {
            per_task,
            video_len,
            weight_decay,
        } => {
            if *video_len < spec.horizon || *per_task == 0 || *weight_decay <= 0.0 {
                return Err(Error::Config(format!(
                    "video length {video_len} must be at least the horizon {} with positive plan count and weight decay",
                    spec.horizon
                )));
            }
            task_actions
                .iter()
                .enumerate()
                .map(|(t, acts)| random_plans(acts, t, *per_task, *video_len, *weight_decay, &mut rng))
                .collect::<Result<_>>()?
        }
        PlanLayout::Explicit { plans } => {
            if plans.len() != spec.num_tasks {
                return Err(Error::Config(format!(
                    "{} explicit plan tables for {} tasks",
                    plans.len(),
                    spec.num_tasks
                )));
            }
            let mut out = Vec::new();
            for (t, table) in plans.iter().enumerate() {
                let z: f64 = table.iter().map(|p| p.weight).sum();
                if table.is_empty() || z <= 0.0 {
                    return Err(Error::Config(format!("task {t} has no weighted plans")));
                }
                for p in table {
                    if p.actions.len() < spec.horizon {
                        return Err(Error::Config(format!(
                            "task {t}: plan shorter than horizon {}",
                            spec.horizon
                        )));
                    }
                    if let Some(a) = p.actions.iter().find(|a| !task_actions[t].contains(a)) {
                        return Err(Error::Config(format!(
                            "task {t}: plan uses action {a} outside the task subset"
                        )));
                    }
                }
                out.push(
                    table
                        .iter()
                        .map(|p| PlanVariant {
                            actions: p.actions.clone(),
                            weight: p.weight / z,
                        })
                        .collect(),
                );
            }
            out
        }
    };
    let action_visual = (0..num_actions)
        .map(|_| unit_vector(spec.visual_dim, &mut rng))
        .collect();
    let task_visual = (0..spec.num_tasks)
        .map(|_| {
            unit_vector(spec.visual_dim, &mut rng)
                .into_iter()
                .map(|x| x * spec.task_visual_scale)
                .collect()
        })
        .collect();
    Ok(World {
        spec: spec.clone(),
        num_actions,
        task_actions,
        plans,
        action_visual,
        task_visual,
    })
}

impl World {
    pub fn num_tasks(&self) -> usize {
        self.spec.num_tasks
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    /// Keywords of an action's synthetic caption: one verb and one noun.
    pub fn action_keywords(&self, action: usize) -> Vec<String> {
        let verbs = self.spec.caption.num_verbs.min(VERBS.len());
        vec![
            VERBS[action % verbs].to_string(),
            format!("object{}", action),
        ]
    }

    fn keyword_vector(&self, keyword: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.spec.seed.to_le_bytes());
        h.update(keyword.as_bytes());
        let d = h.finalize();
        let key = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        unit_vector(self.spec.text_dim, &mut seeded(key))
    }

    /// Whether `plan` is a contiguous window of one of the task's orderings.
    pub fn is_admissible(&self, task: usize, plan: &[usize]) -> bool {
        task < self.num_tasks()
            && plan.iter().all(|a| self.task_actions[task].contains(a))
            && self.plans[task]
                .iter()
                .any(|v| v.actions.windows(plan.len()).any(|w| w == plan))
    }

    /// Noisy observation of `action` performed within `task`.
    pub fn observe<R: Rng>(&self, action: usize, task: usize, rng: &mut R) -> Vec<f64> {
        let s = &self.spec;
        let text = caption_embed(self, action, task, s.seed);
        let mut o: Vec<f64> = self.action_visual[action]
            .iter()
            .zip(&self.task_visual[task])
            .map(|(a, t)| a + t)
            .collect();
        o.extend(text.vector);
        if s.obs_noise > 0.0 {
            for v in o.iter_mut() {
                *v += s.obs_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        o
    }
}

/// Deterministic stand-in for "caption the frame, keep verb + noun, encode".
///
/// The vector is the normalised sum of the action's keyword vectors, plus a
/// smaller task-keyword component, plus caption noise drawn from a stream
/// keyed by `(seed, action, task)`.
pub fn caption_embed(world: &World, action: usize, task: usize, seed: u64) -> TextEmbedding {
    let keywords = world.action_keywords(action);
    let dim = world.spec.text_dim;
    let mut v = vec![0.0; dim];
    for kw in &keywords {
        for (a, b) in v.iter_mut().zip(world.keyword_vector(kw)) {
            *a += b;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    let task_kw = world.keyword_vector(&format!("task{task}"));
    let cap = &world.spec.caption;
    let mut rng = stream_rng(seed, action as u64, task as u64 + 1);
    for (x, t) in v.iter_mut().zip(task_kw) {
        *x += cap.task_scale * t;
        if cap.noise > 0.0 {
            *x += cap.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    TextEmbedding {
        vector: v,
        keywords,
    }
}

fn pick_variant<'a, R: Rng>(variants: &'a [PlanVariant], rng: &mut R) -> &'a PlanVariant {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for v in variants {
        acc += v.weight;
        if u < acc {
            return v;
        }
    }
    variants.last().expect("non-empty plan table")
}

/// Samples `n_videos` videos and cuts them into plan instances.
pub fn sample_dataset(
    world: &World,
    n_videos: usize,
    protocol: Protocol,
    seed: u64,
) -> Result<Vec<PlanInstance>> {
    if n_videos == 0 {
        return Err(Error::Config("need at least one video".into()));
    }
    let t = world.horizon();
    let mut out = Vec::new();
    for vid in 0..n_videos {
        let mut rng = stream_rng(seed, vid as u64, 0);
        let task = rng.random_range(0..world.num_tasks());
        let video = &pick_variant(&world.plans[task], &mut rng).actions;
        let windows: Vec<usize> = match protocol {
            Protocol::SlidingWindow => (0..=video.len() - t).collect(),
            Protocol::OnePerVideo => vec![rng.random_range(0..=video.len() - t)],
        };
        for w in windows {
            let actions = video[w..w + t].to_vec();
            let obs_start = world.observe(actions[0], task, &mut rng);
            let obs_goal = world.observe(actions[t - 1], task, &mut rng);
            out.push(PlanInstance {
                task,
                actions,
                obs_start,
                obs_goal,
                video_id: vid,
                window_index: w,
                split: None,
            });
        }
    }
    Ok(out)
}

/// Video-level split: every window of a video lands on the same side.
/// Instances come back tagged with their side.
pub fn split_dataset(
    instances: &[PlanInstance],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<PlanInstance>, Vec<PlanInstance>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut videos: Vec<usize> = instances
        .iter()
        .map(|i| i.video_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    videos.shuffle(&mut seeded(seed));
    let n_train = (ratio * videos.len() as f64).round() as usize;
    if n_train == 0 {
        return Err(Error::EmptySplit {
            ratio,
            side: "train",
            videos: videos.len(),
        });
    }
    if n_train >= videos.len() {
        return Err(Error::EmptySplit {
            ratio,
            side: "test",
            videos: videos.len(),
        });
    }
    let train_ids: BTreeSet<usize> = videos[..n_train].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for inst in instances {
        let mut inst = inst.clone();
        if train_ids.contains(&inst.video_id) {
            inst.split = Some(Split::Train);
            train.push(inst);
        } else {
            inst.split = Some(Split::Test);
            test.push(inst);
        }
    }
    Ok((train, test))
}

/// Zeroes the caption-text channels of both observations, leaving the
/// visual channels intact.
pub fn zero_text_channels(instances: &mut [PlanInstance], visual_dim: usize) {
    for inst in instances {
        for o in [&mut inst.obs_start, &mut inst.obs_goal] {
            o.iter_mut().skip(visual_dim).for_each(|x| *x = 0.0);
        }
    }
}

/// Ground-truth plan multiplicities per group, counted over `instances`.
pub fn group_plan_counts(instances: &[PlanInstance]) -> BTreeMap<GroupKey, BTreeMap<Vec<usize>, usize>> {
    let mut out: BTreeMap<GroupKey, BTreeMap<Vec<usize>, usize>> = BTreeMap::new();
    for i in instances {
        *out.entry(i.group_key())
            .or_default()
            .entry(i.actions.clone())
            .or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn config_keys_update_the_spec() {
        let mut s = WorldSpec::default();
        for (k, v) in [("tasks", "4"), ("per_task", "5"), ("video_len", "5"), ("obs_noise", "0.1")] {
            s.set(k, v).unwrap();
        }
        assert_eq!(s.num_tasks, 4);
        assert_eq!(s.actions, ActionLayout::Disjoint { per_task: 5 });
        s.set("actions", "shared").unwrap();
        assert_eq!(s.actions, ActionLayout::Shared { num_actions: 20 });
        assert!(s.set("per_task", "3").is_err());
        assert!(s.set("colour", "red").is_err());
        assert!(s.set("horizon", "x").is_err());
    }

    #[test]
    fn single_task_single_plan_world_has_one_mode_per_group() {
        let spec = WorldSpec {
            num_tasks: 1,
            actions: ActionLayout::Disjoint { per_task: 3 },
            plans: PlanLayout::Random {
                per_task: 1,
                video_len: 3,
                weight_decay: 1.0,
            },
            ..WorldSpec::default()
        };
        let w = generate_world(&spec).unwrap();
        assert_eq!(w.num_actions, 3);
        let data = sample_dataset(&w, 50, Protocol::SlidingWindow, 1).unwrap();
        for modes in group_plan_counts(&data).values() {
            assert_eq!(modes.len(), 1);
        }
    }

    #[test]
    fn disjoint_world_counts() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        assert_eq!(w.num_actions, 60);
        for acts in &w.task_actions {
            assert_eq!(acts.len(), 6);
        }
        let union: BTreeSet<usize> = w.task_actions.iter().flatten().copied().collect();
        assert_eq!(union.len(), 60);
        for (t, table) in w.plans.iter().enumerate() {
            assert!(table.len() >= 2);
            for p in table {
                assert!(p.actions.iter().all(|a| w.task_actions[t].contains(a)));
            }
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_world() {
        let a = serde_json::to_vec(&generate_world(&WorldSpec::default()).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_world(&WorldSpec::default()).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = WorldSpec {
            seed: 1,
            ..WorldSpec::default()
        };
        let c = serde_json::to_vec(&generate_world(&other).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_actions_for_distinct_steps_is_rejected() {
        let spec = WorldSpec {
            actions: ActionLayout::Disjoint { per_task: 2 },
            plans: PlanLayout::Random {
                per_task: 1,
                video_len: 3,
                weight_decay: 1.0,
            },
            ..WorldSpec::default()
        };
        assert!(matches!(
            generate_world(&spec),
            Err(Error::InsufficientActions { .. })
        ));
        let spec = WorldSpec {
            horizon: 1,
            ..WorldSpec::default()
        };
        assert!(generate_world(&spec).is_err());
    }

    #[test]
    fn overlapping_and_shared_layouts_cover_all_actions() {
        let spec = WorldSpec {
            num_tasks: 4,
            actions: ActionLayout::Overlapping {
                per_task: 6,
                shared: 2,
            },
            ..WorldSpec::default()
        };
        let w = generate_world(&spec).unwrap();
        assert_eq!(w.num_actions, 16);
        assert!(w.task_actions[0].iter().any(|a| w.task_actions[1].contains(a)));
        let spec = WorldSpec {
            num_tasks: 3,
            actions: ActionLayout::Shared { num_actions: 8 },
            ..WorldSpec::default()
        };
        let w = generate_world(&spec).unwrap();
        assert!(w.task_actions.iter().all(|s| s.len() == 8));
    }

    #[test]
    fn sliding_window_counts() {
        let spec = WorldSpec {
            plans: PlanLayout::Random {
                per_task: 2,
                video_len: 5,
                weight_decay: 1.0,
            },
            ..WorldSpec::default()
        };
        let w = generate_world(&spec).unwrap();
        let d = sample_dataset(&w, 1, Protocol::SlidingWindow, 0).unwrap();
        assert_eq!(d.len(), 3);
        let d = sample_dataset(&w, 100, Protocol::OnePerVideo, 0).unwrap();
        assert_eq!(d.len(), 100);
        assert!(sample_dataset(&w, 0, Protocol::OnePerVideo, 0).is_err());
    }

    #[test]
    fn every_sampled_plan_is_admissible() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        for inst in sample_dataset(&w, 200, Protocol::SlidingWindow, 3).unwrap() {
            assert!(w.is_admissible(inst.task, &inst.actions));
            assert_eq!(inst.obs_start.len(), w.obs_dim());
            assert!(inst.obs_start.iter().chain(&inst.obs_goal).all(|x| x.is_finite()));
        }
    }

    #[test]
    fn noiseless_observations_are_identical_per_group() {
        let spec = WorldSpec {
            obs_noise: 0.0,
            ..WorldSpec::default()
        };
        let w = generate_world(&spec).unwrap();
        let d = sample_dataset(&w, 300, Protocol::SlidingWindow, 5).unwrap();
        let mut seen: BTreeMap<GroupKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for i in &d {
            let e = seen
                .entry(i.group_key())
                .or_insert_with(|| (i.obs_start.clone(), i.obs_goal.clone()));
            assert_eq!(e.0, i.obs_start);
            assert_eq!(e.1, i.obs_goal);
        }
    }

    #[test]
    fn caption_embeddings() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let a = caption_embed(&w, 3, 0, 11);
        assert_eq!(a, caption_embed(&w, 3, 0, 11));
        assert_eq!(a.vector.len(), w.spec.text_dim);
        assert_eq!(a.keywords.len(), 2);

        // Monte Carlo: same action across tasks beats different actions
        // within one task, on average over 1000 draws.
        let (mut same_action, mut same_task) = (0.0, 0.0);
        let n = 1000;
        for s in 0..n {
            let mut rng = seeded(s);
            let a1 = rng.random_range(0..w.num_actions);
            let mut a2 = rng.random_range(0..w.num_actions);
            while a2 == a1 {
                a2 = rng.random_range(0..w.num_actions);
            }
            let t1 = rng.random_range(0..w.num_tasks());
            let mut t2 = rng.random_range(0..w.num_tasks());
            while t2 == t1 {
                t2 = rng.random_range(0..w.num_tasks());
            }
            let x = caption_embed(&w, a1, t1, 2 * s);
            let y = caption_embed(&w, a1, t2, 2 * s + 1);
            let z = caption_embed(&w, a2, t1, 2 * s + 1);
            same_action += cosine(&x.vector, &y.vector);
            same_task += cosine(&x.vector, &z.vector);
        }
        assert!(same_action / n as f64 > same_task / n as f64);

        let mut spec = WorldSpec::default();
        spec.caption.noise = 0.0;
        let w = generate_world(&spec).unwrap();
        assert_eq!(caption_embed(&w, 5, 2, 1).vector, caption_embed(&w, 5, 2, 99).vector);
    }

    #[test]
    fn split_is_video_level_and_deterministic() {
        let spec = WorldSpec {
            plans: PlanLayout::Random {
                per_task: 2,
                video_len: 5,
                weight_decay: 1.0,
            },
            ..WorldSpec::default()
        };
        let w = generate_world(&spec).unwrap();
        let d = sample_dataset(&w, 10, Protocol::SlidingWindow, 0).unwrap();
        let (train, test) = split_dataset(&d, 0.7, 4).unwrap();
        let tv: BTreeSet<usize> = train.iter().map(|i| i.video_id).collect();
        let sv: BTreeSet<usize> = test.iter().map(|i| i.video_id).collect();
        assert_eq!(tv.len(), 7);
        assert_eq!(sv.len(), 3);
        assert!(tv.is_disjoint(&sv));
        assert!(train.iter().all(|i| i.split == Some(Split::Train)));
        let (train2, _) = split_dataset(&d, 0.7, 4).unwrap();
        assert_eq!(train, train2);
        assert!(matches!(split_dataset(&d, 0.01, 0), Err(Error::EmptySplit { .. })));
        assert!(matches!(split_dataset(&d, 0.99, 0), Err(Error::EmptySplit { .. })));
        assert!(split_dataset(&d, 1.0, 0).is_err());
    }
}
