//! Masked diffusion training.
//!
//! Each batch element gets its own diffusion step and noise draw. The loss
//! is the mean squared error between the weighted, masked one-hot target and
//! the projected model output, over action rows only.

use std::path::Path;

use maskplan_tensor::{clip_global_norm, AdamConfig, AdamState, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, ClassifierConfig, ClassifierReport, ClassifierTrainConfig, TaskClassifier};
use crate::config::{list, optional, parse_kv, value};
use crate::diffusion::make_schedule;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::mask::{
    apply_mask, assemble_input, build_task_masks, one_hot_actions, project_actions_var, ActionMask, Condition,
    MaskKind, ProjectionConfig, StateLayout,
};
use crate::metrics::score_plans;
use crate::planner::{make_queries, PlannerModel, Sampler};
use crate::rng::stream_rng;
use crate::schedule::LrSchedule;
use crate::unet::{Denoiser, UNetConfig};
use crate::world::{PlanInstance, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub boundary_weight: f64,
    pub mask: MaskKind,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub unet: UNetConfig,
    /// Held-out SR is measured every this many steps; 0 disables it.
    pub eval_every: u64,
    pub eval_instances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 64,
            lr: LrSchedule {
                base: 1e-3,
                warmup: 500,
                milestones: vec![6_000, 8_500],
                decay: 0.5,
                floor: None,
            },
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            boundary_weight: 10.0,
            mask: MaskKind::Hard,
            seed: 0,
            grad_clip: None,
            unet: UNetConfig::default(),
            eval_every: 0,
            eval_instances: 200,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "steps" => self.steps = value(key, v)?,
            "batch_size" | "batch" => self.batch_size = value(key, v)?,
            "lr" | "base_lr" => self.lr.base = value(key, v)?,
            "warmup" => self.lr.warmup = value(key, v)?,
            "milestones" => self.lr.milestones = list(key, v)?,
            "decay" => self.lr.decay = value(key, v)?,
            "lr_floor" => self.lr.floor = optional(key, v)?,
            "diffusion_steps" => self.diffusion_steps = value(key, v)?,
            "beta_start" => self.beta_start = value(key, v)?,
            "beta_end" => self.beta_end = value(key, v)?,
            "boundary_weight" | "w" => self.boundary_weight = value(key, v)?,
            "mask" => self.mask = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "grad_clip" => self.grad_clip = optional(key, v)?,
            "channels" => {
                let c: Vec<usize> = list(key, v)?;
                self.unet.channels = c
                    .try_into()
                    .map_err(|_| Error::Config("channels needs exactly three widths".into()))?;
            }
            "embed_dim" => self.unet.embed_dim = value(key, v)?,
            "embed_hidden" => self.unet.embed_hidden = value(key, v)?,
            "eval_every" => self.eval_every = value(key, v)?,
            "eval_instances" => self.eval_instances = value(key, v)?,
            other => return Err(Error::Config(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in a flat config text, ignoring keys listed
    /// in `skip` (those belonging to another stage).
    pub fn apply_text(&mut self, text: &str, skip: &[&str]) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            if !skip.contains(&k.as_str()) {
                self.set(&k, &v)?;
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let c = self.unet.channels;
        format!(
            "steps = {}\nbatch_size = {}\nlr = {}\nwarmup = {}\nmilestones = {}\ndecay = {}\nlr_floor = {}\n\
             diffusion_steps = {}\nbeta_start = {}\nbeta_end = {}\nboundary_weight = {}\nmask = {}\nseed = {}\n\
             grad_clip = {}\nchannels = {},{},{}\nembed_dim = {}\nembed_hidden = {}\neval_every = {}\neval_instances = {}\n",
            self.steps,
            self.batch_size,
            self.lr.base,
            self.lr.warmup,
            join(&self.lr.milestones),
            self.lr.decay,
            opt(self.lr.floor),
            self.diffusion_steps,
            self.beta_start,
            self.beta_end,
            self.boundary_weight,
            self.mask,
            self.seed,
            opt(self.grad_clip),
            c[0],
            c[1],
            c[2],
            self.unet.embed_dim,
            self.unet.embed_hidden,
            self.eval_every,
            self.eval_instances
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if self.lr.warmup > self.steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds total steps {}",
                self.lr.warmup, self.steps
            )));
        }
        if !(self.lr.base > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        ProjectionConfig::new(self.boundary_weight)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub eval_sr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub curve: Vec<CurvePoint>,
}

/// Model inputs and loss constants for one batch.
pub struct Batch {
    pub input: Tensor,
    pub steps: Vec<usize>,
    /// Mask times column weights, `[B, L_a, T]`.
    pub weight: Tensor,
    /// Weighted masked one-hot target, `[B, L_a, T]`.
    pub target: Tensor,
}

/// Builds a batch: masked one-hot `x0`, per-element step and masked noise,
/// `x_n`, and the projected model input. `rng_for(i)` supplies element `i`'s
/// randomness.
pub fn build_batch<R: Rng>(
    model: &PlannerModel,
    batch: &[&PlanInstance],
    masks: &[&ActionMask],
    mut rng_for: impl FnMut(usize) -> R,
) -> Result<Batch> {
    let l = model.denoiser.layout;
    let (t, la) = (l.horizon, l.action_dim);
    let big_n = model.schedule.steps();
    let cw = model.projection.column_weights(t);
    let b = batch.len();
    let mut input = vec![0.0; b * l.len()];
    let mut weight = vec![0.0; b * la * t];
    let mut target = vec![0.0; b * la * t];
    let mut steps = Vec::with_capacity(b);
    for (i, (inst, mask)) in batch.iter().zip(masks).enumerate() {
        if inst.horizon() != t {
            return Err(Error::Shape(format!(
                "instance horizon {} vs model horizon {t}",
                inst.horizon()
            )));
        }
        let mut rng = rng_for(i);
        let n = rng.random_range(1..=big_n);
        let mut x0 = one_hot_actions(&inst.actions, la)?;
        apply_mask(&mut x0, mask, t);
        let mut eps: Vec<f64> = (0..la * t).map(|_| rng.sample(StandardNormal)).collect();
        apply_mask(&mut eps, mask, t);
        let xn = model.schedule.q_sample(&x0, n, &eps)?;
        let cond = Condition::new(inst.task, l.task_dim, inst);
        assemble_input(&l, &xn, &cond, &model.projection, &mut input[i * l.len()..(i + 1) * l.len()])?;
        let off = i * la * t;
        for a in 0..la {
            let m = mask.weights[a];
            for c in 0..t {
                let k = off + a * t + c;
                weight[k] = m * cw[c];
                target[k] = x0[a * t + c] * cw[c];
            }
        }
        steps.push(n);
    }
    Ok(Batch {
        input: Tensor::new(&[b, l.rows(), t], input)?,
        steps,
        weight: Tensor::new(&[b, la, t], weight)?,
        target: Tensor::new(&[b, la, t], target)?,
    })
}

/// Forward pass and loss. Returns `(model output, loss)` vars.
pub fn loss_graph(
    g: &mut Graph,
    denoiser: &Denoiser,
    p: &maskplan_tensor::Bound,
    batch: &Batch,
) -> Result<(Var, Var)> {
    let x = g.constant(batch.input.clone());
    let out = denoiser.forward(g, p, x, &batch.steps)?;
    let pred = project_actions_var(g, out, &denoiser.layout, batch.weight.clone())?;
    let target = g.constant(batch.target.clone());
    let loss = g.mse(pred, target)?;
    Ok((out, loss))
}

/// One optimiser update on `batch`; returns the pre-update loss.
pub fn train_step(
    model: &mut PlannerModel,
    adam: &mut AdamState,
    batch: &Batch,
    lr: f64,
    grad_clip: Option<f64>,
    step: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.denoiser.params.bind(&mut g);
    let (_, loss) = loss_graph(&mut g, &model.denoiser, &p, batch)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::Diverged { step, loss: lv, lr });
    }
    let grads = g.backward(loss)?;
    let mut grads = model.denoiser.params.collect_grads(&p, &grads);
    if let Some(c) = grad_clip {
        clip_global_norm(&mut grads, c);
    }
    adam.step_with_lr(&mut model.denoiser.params, &grads, lr)?;
    Ok(lv)
}

pub fn layout_for(train: &[PlanInstance], num_tasks: usize, num_actions: usize) -> Result<StateLayout> {
    let first = train
        .first()
        .ok_or_else(|| Error::Config("empty training set".into()))?;
    Ok(StateLayout {
        task_dim: num_tasks,
        action_dim: num_actions,
        obs_dim: first.obs_start.len(),
        horizon: first.horizon(),
    })
}

/// Fresh model for `cfg`, with masks built from `train`.
pub fn init_model(train: &[PlanInstance], layout: StateLayout, cfg: &TrainConfig) -> Result<PlannerModel> {
    cfg.validate()?;
    let masks = build_task_masks(train, layout.task_dim, layout.action_dim)?;
    Ok(PlannerModel {
        denoiser: Denoiser::new(cfg.unet.clone(), layout, cfg.diffusion_steps, cfg.seed)?,
        schedule: make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?,
        projection: ProjectionConfig::new(cfg.boundary_weight)?,
        masks,
        trained_with: if cfg.mask == MaskKind::None {
            MaskKind::None
        } else {
            MaskKind::Hard
        },
    })
}

/// Held-out SR with ground-truth task conditioning and deterministic sampling.
pub fn eval_sr(model: &PlannerModel, eval: &[PlanInstance]) -> Result<f64> {
    let kind = model.trained_with;
    let qs = make_queries(model, eval, None, kind)?;
    let out = model.sample_all(&qs, Sampler::Deterministic, 0, 0, 256)?;
    let pred: Vec<Vec<usize>> = out.into_iter().map(|s| s.actions).collect();
    let gt: Vec<Vec<usize>> = eval.iter().map(|i| i.actions.clone()).collect();
    Ok(score_plans(&pred, &gt)?.sr)
}

/// Trains a denoiser on `train`. Masks come from ground truth: task masks
/// for hard and soft configs, all ones for `none`.
pub fn train_diffusion(
    train: &[PlanInstance],
    layout: StateLayout,
    cfg: &TrainConfig,
    eval: Option<&[PlanInstance]>,
) -> Result<(PlannerModel, TrainReport)> {
    if let Some(i) = train.iter().find(|i| i.split == Some(Split::Test)) {
        return Err(Error::TestDataInTraining { video_id: i.video_id });
    }
    let mut model = init_model(train, layout, cfg)?;
    let ones = ActionMask::all_ones(layout.action_dim);
    let mut adam = AdamState::new(AdamConfig::default(), &model.denoiser.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut cursor, mut epoch) = (order.len(), 0u64);
    let mut curve = Vec::new();
    let eval = eval.map(|e| &e[..e.len().min(cfg.eval_instances)]);
    let mut last = f64::NAN;
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut stream_rng(cfg.seed, 0xBA7C, epoch));
                epoch += 1;
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<&PlanInstance> = idx.iter().map(|&i| &train[i]).collect();
        let masks: Vec<&ActionMask> = batch
            .iter()
            .map(|i| match model.trained_with {
                MaskKind::None => &ones,
                _ => model.masks.hard(i.task),
            })
            .collect();
        let b = build_batch(&model, &batch, &masks, |i| stream_rng(cfg.seed, step, i as u64))?;
        let lr = cfg.lr.lr_at(step);
        last = train_step(&mut model, &mut adam, &b, lr, cfg.grad_clip, step)?;
        let eval_sr = match eval {
            Some(e) if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) => {
                Some(eval_sr(&model, e)?)
            }
            _ => None,
        };
        if step % 50 == 0 || step == 1 || step == cfg.steps || eval_sr.is_some() {
            if step % 1000 == 0 {
                log::info!("step {step}: loss {last:.5}, lr {lr:.2e}");
            }
            curve.push(CurvePoint {
                step,
                loss: last,
                lr,
                eval_sr,
            });
        }
    }
    Ok((
        model,
        TrainReport {
            final_loss: last,
            curve,
        },
    ))
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut s = String::from("step,loss,lr,eval_sr\n");
    for p in curve {
        let sr = p.eval_sr.map_or(String::new(), |v| format!("{v}"));
        s.push_str(&format!("{},{},{},{}\n", p.step, p.loss, p.lr, sr));
    }
    write_atomic(path, s.as_bytes())
}

pub struct PipelineOutput {
    pub classifier: TaskClassifier,
    pub classifier_report: ClassifierReport,
    pub planner: PlannerModel,
    pub train_report: TrainReport,
}

/// Both stages: the task classifier, then the denoiser on ground-truth labels.
pub fn run_training(
    train: &[PlanInstance],
    num_tasks: usize,
    num_actions: usize,
    classifier: ClassifierConfig,
    classifier_cfg: &ClassifierTrainConfig,
    cfg: &TrainConfig,
    eval: Option<&[PlanInstance]>,
) -> Result<PipelineOutput> {
    let mut clf = TaskClassifier::new(classifier, classifier_cfg.seed)?;
    let classifier_report = train_classifier(&mut clf, train, classifier_cfg)?;
    let layout = layout_for(train, num_tasks, num_actions)?;
    let (planner, train_report) = train_diffusion(train, layout, cfg, eval)?;
    Ok(PipelineOutput {
        classifier: clf,
        classifier_report,
        planner,
        train_report,
    })
}
