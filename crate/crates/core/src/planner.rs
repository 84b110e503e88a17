//! Reverse-diffusion inference and plan decoding.
//!
//! Only action rows are carried between steps; task and observation rows
//! are rebuilt from the condition before every model call. Each query draws
//! its noise from a stream keyed by `(seed, query id, sample index)`, so
//! outputs do not depend on batch composition or worker count.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, TaskClassifier};
use crate::diffusion::{ddim_timesteps, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::mask::{apply_mask, assemble_input, decode, ActionMask, Condition, MaskKind, ProjectionConfig, TaskMasks};
use crate::rng::stream_rng;
use crate::unet::Denoiser;
use crate::world::{GroupKey, PlanInstance};

/// A trained denoiser with everything needed to sample from it.
#[derive(Clone, Debug)]
pub struct PlannerModel {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub projection: ProjectionConfig,
    /// Hard task masks from the training split.
    pub masks: TaskMasks,
    /// Mask regime used in training: `Hard` or `None`.
    pub trained_with: MaskKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Ddpm,
    Ddim { steps: usize, eta: f64 },
    /// Zero initial state and no injected noise.
    Deterministic,
    /// One noise draw and a single model call at the last step.
    Noise,
}

impl Sampler {
    pub fn parse(name: &str, ddim_steps: usize, eta: f64) -> Result<Self> {
        match name {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim {
                steps: ddim_steps,
                eta,
            }),
            "det" | "deterministic" => Ok(Self::Deterministic),
            "noise" => Ok(Self::Noise),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Query {
    pub id: u64,
    pub condition: Condition,
    pub mask: ActionMask,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSample {
    pub actions: Vec<usize>,
    /// Final clean estimate of the action rows, `L_a x T`.
    pub logits: Vec<f64>,
    pub mask_kind: MaskKind,
    pub label: usize,
}

/// Mask and condition for one instance given a task posterior.
pub fn make_query(
    model: &PlannerModel,
    inst: &PlanInstance,
    posterior: &[f64],
    kind: MaskKind,
    id: u64,
) -> Result<Query> {
    let label = argmax(posterior);
    let mask = match kind {
        MaskKind::Hard => model.masks.hard(label).clone(),
        MaskKind::Soft => model.masks.soft(posterior)?,
        MaskKind::None => ActionMask::all_ones(model.masks.action_dim()),
    };
    Ok(Query {
        id,
        condition: Condition::new(label, model.masks.num_tasks(), inst),
        mask,
        label,
    })
}

/// Queries for `instances`, with task posteriors from `classifier` or, when
/// absent, one-hot ground truth.
pub fn make_queries(
    model: &PlannerModel,
    instances: &[PlanInstance],
    classifier: Option<&TaskClassifier>,
    kind: MaskKind,
) -> Result<Vec<Query>> {
    let l_c = model.masks.num_tasks();
    let posts: Vec<Vec<f64>> = match classifier {
        Some(c) => {
            if c.config.num_tasks != l_c {
                return Err(Error::Shape(format!(
                    "classifier predicts {} tasks, denoiser expects {l_c}",
                    c.config.num_tasks
                )));
            }
            let mut out = Vec::with_capacity(instances.len());
            for chunk in instances.chunks(256) {
                let refs: Vec<&PlanInstance> = chunk.iter().collect();
                out.extend(c.predict_proba(&refs)?);
            }
            out
        }
        None => instances
            .iter()
            .map(|i| {
                let mut p = vec![0.0; l_c];
                p[i.task] = 1.0;
                p
            })
            .collect(),
    };
    instances
        .iter()
        .zip(&posts)
        .enumerate()
        .map(|(i, (inst, p))| make_query(model, inst, p, kind, i as u64))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn zero_masked(block: &mut [f64], mask: &ActionMask, horizon: usize) {
    for (row, w) in block.chunks_mut(horizon).zip(&mask.weights) {
        if *w == 0.0 {
            row.fill(0.0);
        }
    }
}

/// Observer called with `(step, action blocks)` after every reverse update.
pub type StepObserver<'a> = dyn FnMut(usize, &[Vec<f64>]) + 'a;

impl PlannerModel {
    fn predict_x0(&self, xs: &[Vec<f64>], queries: &[Query], n: usize) -> Result<Vec<Vec<f64>>> {
        let l = self.denoiser.layout;
        let mut input = vec![0.0; queries.len() * l.len()];
        for ((x, q), slot) in xs.iter().zip(queries).zip(input.chunks_mut(l.len())) {
            assemble_input(&l, x, &q.condition, &self.projection, slot)?;
        }
        let out = self.denoiser.denoise(&input, &vec![n; queries.len()])?;
        let t = l.horizon;
        let rows = l.action_rows();
        Ok(out
            .chunks(l.len())
            .zip(queries)
            .map(|(o, q)| {
                let mut a = o[rows.start * t..rows.end * t].to_vec();
                apply_mask(&mut a, &q.mask, t);
                a
            })
            .collect())
    }

    /// Runs one batch of queries through the chosen sampler.
    pub fn sample_batch(
        &self,
        queries: &[Query],
        sampler: Sampler,
        seed: u64,
        sample_index: u64,
        mut observer: Option<&mut StepObserver<'_>>,
    ) -> Result<Vec<PlanSample>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let l = self.denoiser.layout;
        let (t, len) = (l.horizon, l.action_block_len());
        for q in queries {
            if q.mask.weights.len() != l.action_dim {
                return Err(Error::Shape(format!(
                    "mask over {} actions, denoiser has {}",
                    q.mask.weights.len(),
                    l.action_dim
                )));
            }
        }
        let big_n = self.schedule.steps();
        let mut rngs: Vec<ChaCha8Rng> = queries
            .iter()
            .map(|q| stream_rng(seed, q.id, sample_index))
            .collect();
        let stochastic = !matches!(sampler, Sampler::Deterministic);
        let mut xs: Vec<Vec<f64>> = queries
            .iter()
            .zip(rngs.iter_mut())
            .map(|(q, r)| {
                let mut x = if stochastic { gaussian(r, len) } else { vec![0.0; len] };
                apply_mask(&mut x, &q.mask, t);
                x
            })
            .collect();
        if let Some(obs) = observer.as_mut() {
            obs(big_n, &xs);
        }

        let steps: Vec<(usize, usize)> = match sampler {
            Sampler::Ddpm | Sampler::Deterministic => (1..=big_n).rev().map(|n| (n, n - 1)).collect(),
            Sampler::Noise => vec![(big_n, 0)],
            Sampler::Ddim { steps, eta: _ } => {
                let tau = ddim_timesteps(big_n, steps)?;
                (0..tau.len())
                    .rev()
                    .map(|i| (tau[i], if i == 0 { 0 } else { tau[i - 1] }))
                    .collect()
            }
        };
        let mut x0 = Vec::new();
        for (n, prev) in steps {
            x0 = self.predict_x0(&xs, queries, n)?;
            if prev == 0 {
                break;
            }
            for ((x, h), (q, r)) in xs.iter_mut().zip(&x0).zip(queries.iter().zip(rngs.iter_mut())) {
                let mut z = if stochastic { gaussian(r, len) } else { vec![0.0; len] };
                apply_mask(&mut z, &q.mask, t);
                let mut next = match sampler {
                    Sampler::Ddim { eta, .. } => self.schedule.ddim_step(x, h, n, prev, eta, &z)?,
                    _ => self.schedule.posterior_step(x, h, n, &z)?,
                };
                zero_masked(&mut next, &q.mask, t);
                *x = next;
            }
            if let Some(obs) = observer.as_mut() {
                obs(prev, &xs);
            }
        }
        if let Some(obs) = observer.as_mut() {
            obs(0, &x0);
        }
        Ok(x0
            .into_iter()
            .zip(queries)
            .map(|(logits, q)| PlanSample {
                actions: decode(&logits, &q.mask, t),
                logits,
                mask_kind: q.mask.kind,
                label: q.label,
            })
            .collect())
    }

    /// Samples every query in chunks of `batch`, in parallel over chunks on
    /// the current rayon pool.
    pub fn sample_all(
        &self,
        queries: &[Query],
        sampler: Sampler,
        seed: u64,
        sample_index: u64,
        batch: usize,
    ) -> Result<Vec<PlanSample>> {
        let chunks: Vec<Result<Vec<PlanSample>>> = queries
            .par_chunks(batch.max(1))
            .map(|c| self.sample_batch(c, sampler, seed, sample_index, None))
            .collect();
        let mut out = Vec::with_capacity(queries.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Draws `per_group` plans for every group key of `instances`. With
/// `pooled`, sample `j` of a group is conditioned on the group's
/// `j mod n`-th instance; otherwise every sample uses its first instance.
pub fn sample_groups(
    model: &PlannerModel,
    instances: &[PlanInstance],
    classifier: Option<&TaskClassifier>,
    kind: MaskKind,
    sampler: Sampler,
    per_group: usize,
    pooled: bool,
    seed: u64,
    batch: usize,
) -> Result<BTreeMap<GroupKey, Vec<Vec<usize>>>> {
    let base = make_queries(model, instances, classifier, kind)?;
    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        groups.entry(inst.group_key()).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (gi, (key, members)) in groups.into_iter().enumerate() {
        let queries: Vec<Query> = (0..per_group)
            .map(|j| {
                let mut q = base[members[if pooled { j % members.len() } else { 0 }]].clone();
                q.id = ((gi as u64) << 32) | j as u64;
                q
            })
            .collect();
        let plans = model
            .sample_all(&queries, sampler, seed, 0, batch)?
            .into_iter()
            .map(|s| s.actions)
            .collect();
        out.insert(key, plans);
    }
    Ok(out)
}
