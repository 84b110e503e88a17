//! Task classifier on the concatenated start/goal observations.
//!
//! Two heads: a two-layer MLP, and a small pre-norm transformer that reads
//! the input as a sequence of fixed-width tokens behind a learned CLS token.

use std::collections::BTreeMap;

use maskplan_tensor::{AdamConfig, AdamState, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream_rng};
use crate::schedule::LrSchedule;
use crate::world::{PlanInstance, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Mlp,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub num_tasks: usize,
    /// Length of one observation (visual then text channels).
    pub obs_dim: usize,
    pub visual_dim: usize,
    /// When false the text channels are zeroed before the forward pass.
    pub use_text: bool,
    pub hidden: usize,
    /// Transformer only: token width and model width.
    pub token_width: usize,
    pub model_dim: usize,
    pub ff_hidden: usize,
}

impl ClassifierConfig {
    pub fn mlp(num_tasks: usize, obs_dim: usize, visual_dim: usize) -> Self {
        Self {
            kind: ClassifierKind::Mlp,
            num_tasks,
            obs_dim,
            visual_dim,
            use_text: true,
            hidden: 128,
            token_width: obs_dim,
            model_dim: 64,
            ff_hidden: 128,
        }
    }

    /// Transformer head reading each observation as one token.
    pub fn transformer(num_tasks: usize, obs_dim: usize, visual_dim: usize) -> Self {
        Self {
            kind: ClassifierKind::Transformer,
            token_width: obs_dim,
            model_dim: 64,
            ff_hidden: 128,
            ..Self::mlp(num_tasks, obs_dim, visual_dim)
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.obs_dim
    }
}

#[derive(Clone, Debug)]
enum Head {
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        w3: ParamId,
        b3: ParamId,
    },
    Transformer {
        embed_w: ParamId,
        embed_b: ParamId,
        cls: ParamId,
        pos: ParamId,
        ln1_g: ParamId,
        ln1_b: ParamId,
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        ln2_g: ParamId,
        ln2_b: ParamId,
        ff1_w: ParamId,
        ff1_b: ParamId,
        ff2_w: ParamId,
        ff2_b: ParamId,
        lnf_g: ParamId,
        lnf_b: ParamId,
        head_w: ParamId,
        head_b: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct TaskClassifier {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    head: Head,
}

fn init<R: Rng>(p: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
    p.add(name, Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng))
}

impl TaskClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.num_tasks == 0 || config.obs_dim == 0 || config.visual_dim > config.obs_dim {
            return Err(Error::Config("classifier dims are inconsistent".into()));
        }
        let mut rng = seeded(seed);
        let mut p = ParamStore::new();
        let input = config.input_dim();
        let c = config.num_tasks;
        let head = match config.kind {
            ClassifierKind::Mlp => {
                let h = config.hidden;
                Head::Mlp {
                    w1: init(&mut p, "mlp.w1", &[input, h], input, &mut rng),
                    b1: p.add("mlp.b1", Tensor::zeros(&[h])),
                    w2: init(&mut p, "mlp.w2", &[h, h], h, &mut rng),
                    b2: p.add("mlp.b2", Tensor::zeros(&[h])),
                    w3: init(&mut p, "mlp.w3", &[h, c], h, &mut rng),
                    b3: p.add("mlp.b3", Tensor::zeros(&[c])),
                }
            }
            ClassifierKind::Transformer => {
                let tw = config.token_width;
                if tw == 0 || input % tw != 0 {
                    return Err(Error::Config(format!(
                        "token width {tw} does not divide input width {input}"
                    )));
                }
                let (d, f) = (config.model_dim, config.ff_hidden);
                let seq = input / tw + 1;
                Head::Transformer {
                    embed_w: init(&mut p, "tok.w", &[tw, d], tw, &mut rng),
                    embed_b: p.add("tok.b", Tensor::zeros(&[d])),
                    cls: p.add("cls", Tensor::randn(&[1, d], 0.02, &mut rng)),
                    pos: p.add("pos", Tensor::randn(&[seq, d], 0.02, &mut rng)),
                    ln1_g: p.add("ln1.g", Tensor::ones(&[d])),
                    ln1_b: p.add("ln1.b", Tensor::zeros(&[d])),
                    wq: init(&mut p, "attn.q", &[d, d], d, &mut rng),
                    wk: init(&mut p, "attn.k", &[d, d], d, &mut rng),
                    wv: init(&mut p, "attn.v", &[d, d], d, &mut rng),
                    wo: init(&mut p, "attn.o", &[d, d], d, &mut rng),
                    ln2_g: p.add("ln2.g", Tensor::ones(&[d])),
                    ln2_b: p.add("ln2.b", Tensor::zeros(&[d])),
                    ff1_w: init(&mut p, "ff1.w", &[d, f], d, &mut rng),
                    ff1_b: p.add("ff1.b", Tensor::zeros(&[f])),
                    ff2_w: init(&mut p, "ff2.w", &[f, d], f, &mut rng),
                    ff2_b: p.add("ff2.b", Tensor::zeros(&[d])),
                    lnf_g: p.add("lnf.g", Tensor::ones(&[d])),
                    lnf_b: p.add("lnf.b", Tensor::zeros(&[d])),
                    head_w: init(&mut p, "head.w", &[d, c], d, &mut rng),
                    head_b: p.add("head.b", Tensor::zeros(&[c])),
                }
            }
        };
        Ok(Self {
            config,
            params: p,
            head,
        })
    }

    /// Flattened `[B, 2 L_o]` input rows, with text channels zeroed when
    /// the config says so.
    pub fn inputs(&self, instances: &[&PlanInstance]) -> Result<Tensor> {
        let c = &self.config;
        let mut data = Vec::with_capacity(instances.len() * c.input_dim());
        for inst in instances {
            if inst.obs_start.len() != c.obs_dim || inst.obs_goal.len() != c.obs_dim {
                return Err(Error::Shape(format!(
                    "observation length {} vs classifier obs dim {}",
                    inst.obs_start.len(),
                    c.obs_dim
                )));
            }
            for o in [&inst.obs_start, &inst.obs_goal] {
                if o.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("observation of video {}", inst.video_id)));
                }
                for (i, v) in o.iter().enumerate() {
                    data.push(if c.use_text || i < c.visual_dim { *v } else { 0.0 });
                }
            }
        }
        Ok(Tensor::new(&[instances.len(), c.input_dim()], data)?)
    }

    /// Logits `[B, L_c]` for inputs `[B, 2 L_o]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        match &self.head {
            Head::Mlp {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            } => {
                let h = g.matmul(x, p[*w1])?;
                let h = g.add_bias(h, p[*b1])?;
                let h = g.gelu(h)?;
                let h = g.matmul(h, p[*w2])?;
                let h = g.add_bias(h, p[*b2])?;
                let h = g.gelu(h)?;
                let h = g.matmul(h, p[*w3])?;
                Ok(g.add_bias(h, p[*b3])?)
            }
            Head::Transformer {
                embed_w,
                embed_b,
                cls,
                pos,
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                ln2_g,
                ln2_b,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                lnf_g,
                lnf_b,
                head_w,
                head_b,
            } => {
                let c = &self.config;
                let (tw, d) = (c.token_width, c.model_dim);
                let k = c.input_dim() / tw;
                let s = k + 1;
                let tok = g.reshape(x, &[b * k, tw])?;
                let tok = g.matmul(tok, p[*embed_w])?;
                let tok = g.add_bias(tok, p[*embed_b])?;
                let tok = g.reshape(tok, &[b, k, d])?;
                let cls_tok = g.embedding(p[*cls], &vec![0; b])?;
                let cls_tok = g.reshape(cls_tok, &[b, 1, d])?;
                let h = g.concat(&[cls_tok, tok], 1)?;
                let ids: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
                let pe = g.embedding(p[*pos], &ids)?;
                let pe = g.reshape(pe, &[b, s, d])?;
                let h = g.add(h, pe)?;

                let proj = |g: &mut Graph, v: Var, w: Var| -> Result<Var> {
                    let f = g.reshape(v, &[b * s, d])?;
                    let f = g.matmul(f, w)?;
                    Ok(g.reshape(f, &[b, s, d])?)
                };
                let a = g.norm(h, p[*ln1_g], p[*ln1_b], 2, 1e-5)?;
                let q = proj(g, a, p[*wq])?;
                let kk = proj(g, a, p[*wk])?;
                let v = proj(g, a, p[*wv])?;
                let kt = g.transpose(kk)?;
                let scores = g.batch_matmul(q, kt)?;
                let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
                let att = g.softmax(scores)?;
                let ctx = g.batch_matmul(att, v)?;
                let ctx = proj(g, ctx, p[*wo])?;
                let h = g.add(h, ctx)?;

                let f = g.norm(h, p[*ln2_g], p[*ln2_b], 2, 1e-5)?;
                let f = g.reshape(f, &[b * s, d])?;
                let f = g.matmul(f, p[*ff1_w])?;
                let f = g.add_bias(f, p[*ff1_b])?;
                let f = g.gelu(f)?;
                let f = g.matmul(f, p[*ff2_w])?;
                let f = g.add_bias(f, p[*ff2_b])?;
                let f = g.reshape(f, &[b, s, d])?;
                let h = g.add(h, f)?;

                let cls_out = g.slice(h, 1, 0, 1)?;
                let cls_out = g.reshape(cls_out, &[b, d])?;
                let cls_out = g.norm(cls_out, p[*lnf_g], p[*lnf_b], 1, 1e-5)?;
                let out = g.matmul(cls_out, p[*head_w])?;
                Ok(g.add_bias(out, p[*head_b])?)
            }
        }
    }

    /// Posterior over tasks for each instance.
    pub fn predict_proba(&self, instances: &[&PlanInstance]) -> Result<Vec<Vec<f64>>> {
        if instances.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.inputs(instances)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(x);
        let logits = self.forward(&mut g, &p, x)?;
        let probs = g.softmax(logits)?;
        let out: Vec<Vec<f64>> = g
            .value(probs)
            .data()
            .chunks(self.config.num_tasks)
            .map(<[f64]>::to_vec)
            .collect();
        if out.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier output".into()));
        }
        Ok(out)
    }

    pub fn classify(&self, instances: &[&PlanInstance]) -> Result<Vec<usize>> {
        Ok(self.predict_proba(instances)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn accuracy(&self, instances: &[PlanInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::Config("accuracy over an empty set".into()));
        }
        let mut hits = 0;
        for chunk in instances.chunks(256) {
            let refs: Vec<&PlanInstance> = chunk.iter().collect();
            hits += self
                .classify(&refs)?
                .iter()
                .zip(chunk)
                .filter(|(p, i)| **p == i.task)
                .count();
        }
        Ok(hits as f64 / instances.len() as f64)
    }

    /// Accuracy per plan horizon.
    pub fn accuracy_by_horizon(&self, instances: &[PlanInstance]) -> Result<BTreeMap<usize, f64>> {
        let mut by: BTreeMap<usize, Vec<PlanInstance>> = BTreeMap::new();
        for i in instances {
            by.entry(i.horizon()).or_default().push(i.clone());
        }
        by.into_iter().map(|(h, v)| Ok((h, self.accuracy(&v)?))).collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            lr: LrSchedule {
                base: 1e-3,
                warmup: 100,
                milestones: vec![1000],
                decay: 0.5,
                floor: None,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub steps: u64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub per_horizon: BTreeMap<usize, f64>,
    pub losses: Vec<f64>,
}

/// Cross-entropy training on ground-truth task labels.
pub fn train_classifier(
    model: &mut TaskClassifier,
    train: &[PlanInstance],
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierReport> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("classifier training needs data and batch >= 1".into()));
    }
    if let Some(i) = train.iter().find(|i| i.split == Some(Split::Test)) {
        return Err(Error::TestDataInTraining { video_id: i.video_id });
    }
    let mut adam = AdamState::new(AdamConfig::default(), &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut stream_rng(cfg.seed, 0xC1A5, epoch));
                epoch += 1;
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<&PlanInstance> = idx.iter().map(|&i| &train[i]).collect();
        let targets: Vec<usize> = batch.iter().map(|i| i.task).collect();
        let x = model.inputs(&batch)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let xv = g.constant(x);
        let logits = model.forward(&mut g, &p, xv)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: lv,
                lr: cfg.lr.lr_at(step),
            });
        }
        let grads = g.backward(loss)?;
        let grads = model.params.collect_grads(&p, &grads);
        adam.step_with_lr(&mut model.params, &grads, cfg.lr.lr_at(step + 1))?;
        losses.push(lv);
    }
    Ok(ClassifierReport {
        steps: cfg.steps,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        train_accuracy: model.accuracy(train)?,
        per_horizon: model.accuracy_by_horizon(train)?,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, sample_dataset, split_dataset, Protocol, WorldSpec};
    use maskplan_tensor::gradcheck::check_params;

    fn tiny(kind: ClassifierKind) -> ClassifierConfig {
        ClassifierConfig {
            kind,
            num_tasks: 3,
            obs_dim: 4,
            visual_dim: 2,
            use_text: true,
            hidden: 6,
            token_width: 2,
            model_dim: 4,
            ff_hidden: 6,
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_both_heads() {
        for kind in [ClassifierKind::Mlp, ClassifierKind::Transformer] {
            for seed in 0..3 {
                let m = TaskClassifier::new(tiny(kind), seed).unwrap();
                let x = Tensor::randn(&[3, 8], 1.0, &mut seeded(50 + seed));
                let mut store = m.params.clone();
                let r = check_params(&mut store, 1e-5, |g, p| {
                    let xv = g.constant(x.clone());
                    let logits = m.forward(g, p, xv).expect("forward");
                    g.cross_entropy(logits, &[0, 2, 1])
                })
                .unwrap();
                assert!(
                    r.max_rel_err <= 1e-4,
                    "{kind:?} seed {seed}: {} at {}[{}]",
                    r.max_rel_err,
                    r.worst_param,
                    r.worst_index
                );
            }
        }
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let m = TaskClassifier::new(tiny(ClassifierKind::Transformer), 1).unwrap();
        let inst = PlanInstance {
            task: 0,
            actions: vec![0, 1, 2],
            obs_start: vec![0.1, 0.2, 0.3, 0.4],
            obs_goal: vec![-0.1, 0.0, 0.5, 1.0],
            video_id: 0,
            window_index: 0,
            split: None,
        };
        let p = m.predict_proba(&[&inst, &inst]).unwrap();
        assert_eq!(p.len(), 2);
        for row in p {
            assert_eq!(row.len(), 3);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let bad = TaskClassifier::new(
            ClassifierConfig {
                token_width: 3,
                ..tiny(ClassifierKind::Transformer)
            },
            0,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn text_channels_are_zeroed_when_disabled() {
        let mut cfg = tiny(ClassifierKind::Mlp);
        cfg.use_text = false;
        let m = TaskClassifier::new(cfg, 0).unwrap();
        let inst = PlanInstance {
            task: 0,
            actions: vec![],
            obs_start: vec![1.0, 2.0, 3.0, 4.0],
            obs_goal: vec![5.0, 6.0, 7.0, 8.0],
            video_id: 0,
            window_index: 0,
            split: None,
        };
        let x = m.inputs(&[&inst]).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0, 0.0]);
        let mut bad = inst.clone();
        bad.obs_goal[0] = f64::NAN;
        assert!(matches!(m.predict_proba(&[&bad]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mlp_learns_task_labels_and_rejects_test_data() {
        let spec = WorldSpec {
            num_tasks: 4,
            ..WorldSpec::default()
        };
        let w = generate_world(&spec).unwrap();
        let d = sample_dataset(&w, 200, Protocol::SlidingWindow, 0).unwrap();
        let (train, test) = split_dataset(&d, 0.7, 0).unwrap();
        let mut m = TaskClassifier::new(ClassifierConfig::mlp(4, w.obs_dim(), 64), 0).unwrap();
        let cfg = ClassifierTrainConfig {
            steps: 200,
            ..ClassifierTrainConfig::default()
        };
        let r = train_classifier(&mut m, &train, &cfg).unwrap();
        assert!(r.losses[r.losses.len() - 1] < r.losses[0]);
        assert!(m.accuracy(&test).unwrap() > 0.9);
        assert!(matches!(
            train_classifier(&mut m, &test, &cfg),
            Err(Error::TestDataInTraining { .. })
        ));
    }
}
