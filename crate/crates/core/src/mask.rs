//! State-matrix layout, task-derived action masks, and the conditioning
//! projection.
//!
//! A state is a `D x T` row-major matrix, `D = L_c + L_a + L_o`, rows ordered
//! task block, action block, observation block. Action blocks passed around
//! on their own are `L_a x T`, also row-major.

use std::collections::BTreeMap;
use std::ops::Range;

use maskplan_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::PlanInstance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub task_dim: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub horizon: usize,
}

impl StateLayout {
    pub fn rows(&self) -> usize {
        self.task_dim + self.action_dim + self.obs_dim
    }

    pub fn len(&self) -> usize {
        self.rows() * self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_rows(&self) -> Range<usize> {
        0..self.task_dim
    }

    pub fn action_rows(&self) -> Range<usize> {
        self.task_dim..self.task_dim + self.action_dim
    }

    pub fn obs_rows(&self) -> Range<usize> {
        self.task_dim + self.action_dim..self.rows()
    }

    pub fn action_block_len(&self) -> usize {
        self.action_dim * self.horizon
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateMatrix {
    pub layout: StateLayout,
    pub data: Vec<f64>,
}

impl StateMatrix {
    pub fn zeros(layout: StateLayout) -> Self {
        Self {
            layout,
            data: vec![0.0; layout.len()],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.layout.horizon + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.layout.horizon + col] = v;
    }

    pub fn action_block(&self) -> &[f64] {
        let t = self.layout.horizon;
        let r = self.layout.action_rows();
        &self.data[r.start * t..r.end * t]
    }

    pub fn action_block_mut(&mut self) -> &mut [f64] {
        let t = self.layout.horizon;
        let r = self.layout.action_rows();
        &mut self.data[r.start * t..r.end * t]
    }
}

/// Known conditioning values: task vector and the two boundary observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub task: Vec<f64>,
    pub obs_start: Vec<f64>,
    pub obs_goal: Vec<f64>,
}

impl Condition {
    pub fn new(task_id: usize, num_tasks: usize, inst: &PlanInstance) -> Self {
        let mut task = vec![0.0; num_tasks];
        task[task_id] = 1.0;
        Self {
            task,
            obs_start: inst.obs_start.clone(),
            obs_goal: inst.obs_goal.clone(),
        }
    }

    fn check(&self, layout: &StateLayout) -> Result<()> {
        if self.task.len() != layout.task_dim
            || self.obs_start.len() != layout.obs_dim
            || self.obs_goal.len() != layout.obs_dim
        {
            return Err(Error::Shape(format!(
                "condition dims ({}, {}, {}) vs layout ({}, {})",
                self.task.len(),
                self.obs_start.len(),
                self.obs_goal.len(),
                layout.task_dim,
                layout.obs_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub boundary_weight: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            boundary_weight: 10.0,
        }
    }
}

impl ProjectionConfig {
    pub fn new(boundary_weight: f64) -> Result<Self> {
        if !(boundary_weight >= 1.0) {
            return Err(Error::Config(format!("boundary weight {boundary_weight} < 1")));
        }
        Ok(Self { boundary_weight })
    }

    /// Per-column action weights: `w` on the first and last column, 1 inside.
    pub fn column_weights(&self, horizon: usize) -> Vec<f64> {
        (0..horizon)
            .map(|t| {
                if t == 0 || t + 1 == horizon {
                    self.boundary_weight
                } else {
                    1.0
                }
            })
            .collect()
    }
}

fn write_conditions(layout: &StateLayout, cond: &Condition, data: &mut [f64]) {
    let t = layout.horizon;
    for (k, row) in layout.task_rows().enumerate() {
        data[row * t..(row + 1) * t].fill(cond.task[k]);
    }
    for (k, row) in layout.obs_rows().enumerate() {
        let r = &mut data[row * t..(row + 1) * t];
        r.fill(0.0);
        r[0] = cond.obs_start[k];
        r[t - 1] = cond.obs_goal[k];
    }
}

/// Overwrites task and observation rows with the condition and scales the
/// boundary action columns by `w`, once per call.
pub fn project(x: &StateMatrix, cond: &Condition, cfg: &ProjectionConfig) -> Result<StateMatrix> {
    cond.check(&x.layout)?;
    let mut out = x.clone();
    write_conditions(&x.layout, cond, &mut out.data);
    let t = x.layout.horizon;
    let cw = cfg.column_weights(t);
    for a in out.action_block_mut().chunks_mut(t) {
        for (v, w) in a.iter_mut().zip(&cw) {
            *v *= w;
        }
    }
    Ok(out)
}

/// Writes `project([_; actions; _])` into `out` without building the
/// intermediate state.
pub fn assemble_input(
    layout: &StateLayout,
    actions: &[f64],
    cond: &Condition,
    cfg: &ProjectionConfig,
    out: &mut [f64],
) -> Result<()> {
    cond.check(layout)?;
    if actions.len() != layout.action_block_len() || out.len() != layout.len() {
        return Err(Error::Shape(format!(
            "assemble_input: {} action values, {} output slots for layout {:?}",
            actions.len(),
            out.len(),
            layout
        )));
    }
    write_conditions(layout, cond, out);
    let t = layout.horizon;
    let cw = cfg.column_weights(t);
    let start = layout.task_dim * t;
    for (i, v) in actions.iter().enumerate() {
        out[start + i] = v * cw[i % t];
    }
    Ok(())
}

/// One-hot action block `L_a x T` for a plan.
pub fn one_hot_actions(plan: &[usize], action_dim: usize) -> Result<Vec<f64>> {
    let t = plan.len();
    let mut out = vec![0.0; action_dim * t];
    for (col, &a) in plan.iter().enumerate() {
        if a >= action_dim {
            return Err(Error::Shape(format!("action {a} >= L_a = {action_dim}")));
        }
        out[a * t + col] = 1.0;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Hard,
    Soft,
    None,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown mask kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMask {
    pub weights: Vec<f64>,
    pub kind: MaskKind,
}

impl ActionMask {
    pub fn all_ones(action_dim: usize) -> Self {
        Self {
            weights: vec![1.0; action_dim],
            kind: MaskKind::None,
        }
    }

    pub fn allows(&self, action: usize) -> bool {
        self.weights.get(action).is_some_and(|w| *w > 0.0)
    }

    pub fn allowed(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&a| self.allows(a)).collect()
    }
}

/// Row-wise mask multiply on an `L_a x T` block. Entries with zero weight
/// are written as an exact `0.0`.
pub fn apply_mask(block: &mut [f64], mask: &ActionMask, horizon: usize) {
    for (row, w) in block.chunks_mut(horizon).zip(&mask.weights) {
        if *w == 0.0 {
            row.fill(0.0);
        } else if *w != 1.0 {
            row.iter_mut().for_each(|v| *v *= w);
        }
    }
}

/// Task id to binary action mask, built from training plans only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMasks {
    pub masks: Vec<ActionMask>,
}

pub fn build_task_masks(train: &[PlanInstance], num_tasks: usize, action_dim: usize) -> Result<TaskMasks> {
    if train.is_empty() {
        return Err(Error::Config("cannot build masks from an empty training set".into()));
    }
    let mut weights = vec![vec![0.0; action_dim]; num_tasks];
    for inst in train {
        if inst.task >= num_tasks {
            return Err(Error::Shape(format!("task {} >= L_c = {num_tasks}", inst.task)));
        }
        for &a in &inst.actions {
            if a >= action_dim {
                return Err(Error::Shape(format!("action {a} >= L_a = {action_dim}")));
            }
            weights[inst.task][a] = 1.0;
        }
    }
    if let Some(k) = weights.iter().position(|w| w.iter().all(|v| *v == 0.0)) {
        return Err(Error::EmptyTaskMask(k));
    }
    Ok(TaskMasks {
        masks: weights
            .into_iter()
            .map(|weights| ActionMask {
                weights,
                kind: MaskKind::Hard,
            })
            .collect(),
    })
}

impl TaskMasks {
    pub fn num_tasks(&self) -> usize {
        self.masks.len()
    }

    pub fn action_dim(&self) -> usize {
        self.masks.first().map_or(0, |m| m.weights.len())
    }

    pub fn hard(&self, task: usize) -> &ActionMask {
        &self.masks[task]
    }

    /// `weight[a] = min(1, sum of p_k over tasks whose mask covers a)`.
    pub fn soft(&self, posterior: &[f64]) -> Result<ActionMask> {
        if posterior.len() != self.num_tasks() {
            return Err(Error::Shape(format!(
                "posterior over {} tasks, {} masks",
                posterior.len(),
                self.num_tasks()
            )));
        }
        let sum: f64 = posterior.iter().sum();
        if posterior.iter().any(|p| *p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidPosterior { sum });
        }
        let mut weights = vec![0.0; self.action_dim()];
        for (p, m) in posterior.iter().zip(&self.masks) {
            for (w, v) in weights.iter_mut().zip(&m.weights) {
                if *v > 0.0 {
                    *w += p;
                }
            }
        }
        weights.iter_mut().for_each(|w| *w = w.min(1.0));
        Ok(ActionMask {
            weights,
            kind: MaskKind::Soft,
        })
    }

    /// Mask table as task id to sorted action ids.
    pub fn to_table(&self) -> BTreeMap<usize, Vec<usize>> {
        self.masks.iter().enumerate().map(|(k, m)| (k, m.allowed())).collect()
    }

    pub fn from_table(table: &BTreeMap<usize, Vec<usize>>, action_dim: usize) -> Result<Self> {
        let num_tasks = table.keys().next_back().map_or(0, |k| k + 1);
        let mut masks = vec![
            ActionMask {
                weights: vec![0.0; action_dim],
                kind: MaskKind::Hard,
            };
            num_tasks
        ];
        for (&k, acts) in table {
            for &a in acts {
                if a >= action_dim {
                    return Err(Error::Shape(format!("action {a} >= L_a = {action_dim}")));
                }
                masks[k].weights[a] = 1.0;
            }
        }
        if let Some(k) = masks.iter().position(|m| m.allowed().is_empty()) {
            return Err(Error::EmptyTaskMask(k));
        }
        Ok(Self { masks })
    }
}

/// Per-column argmax over allowed actions; ties go to the lowest id.
pub fn decode(block: &[f64], mask: &ActionMask, horizon: usize) -> Vec<usize> {
    let allowed = mask.allowed();
    (0..horizon)
        .map(|t| {
            let mut best = allowed[0];
            for &a in &allowed[1..] {
                if block[a * horizon + t] > block[best * horizon + t] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Graph-side projection for the loss: slices the action rows out of a
/// `[B, D, T]` model output and multiplies by `weight` (`[B, L_a, T]`, mask
/// times column weights). Task and observation rows never reach the loss.
pub fn project_actions_var(g: &mut Graph, out: Var, layout: &StateLayout, weight: Tensor) -> Result<Var> {
    let r = layout.action_rows();
    let a = g.slice(out, 1, r.start, r.end)?;
    let w = g.constant(weight);
    Ok(g.mul(a, w)?)
}
