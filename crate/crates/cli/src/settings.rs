//! Config layering: defaults, then the `--config` file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use maskplan_core::ablation::AblationConfig;
use maskplan_core::classifier::{ClassifierConfig, ClassifierKind, ClassifierTrainConfig};
use maskplan_core::config::{list, parse_kv, value};
use maskplan_core::io::file_digest;
use maskplan_core::world::{ActionLayout, PlanLayout, WorldSpec};
use serde::Serialize;

use crate::Global;

pub fn config_pairs(global: &Global) -> Result<Vec<(String, String)>> {
    match &global.config {
        None => Ok(Vec::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(parse_kv(&text)?)
        }
    }
}

/// A named input file, recorded by name and content digest so that the
/// snapshot does not depend on the directory a run happens in.
#[derive(Clone, Debug, Serialize)]
pub struct InputRef {
    pub file: String,
    pub sha256: String,
}

pub fn input_ref(path: &Path) -> Result<InputRef> {
    Ok(InputRef {
        file: path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: file_digest(path)?,
    })
}

pub fn world_spec(global: &Global) -> Result<WorldSpec> {
    let mut spec = WorldSpec::default();
    for (k, v) in config_pairs(global)? {
        spec.set(&k, &v)?;
    }
    if let Some(s) = global.seed {
        spec.seed = s;
    }
    if let Some(h) = global.horizon {
        spec.horizon = h as usize;
    }
    Ok(spec)
}

/// Applies one classifier key. Returns false for keys it does not know.
pub fn set_classifier(cfg: &mut ClassifierConfig, train: &mut ClassifierTrainConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "kind" => {
            cfg.kind = match v {
                "mlp" => ClassifierKind::Mlp,
                "transformer" => ClassifierKind::Transformer,
                other => bail!("unknown classifier kind {other:?}"),
            }
        }
        "use_text" => cfg.use_text = value(key, v)?,
        "hidden" => cfg.hidden = value(key, v)?,
        "model_dim" => cfg.model_dim = value(key, v)?,
        "ff_hidden" => cfg.ff_hidden = value(key, v)?,
        "steps" => train.steps = value(key, v)?,
        "batch_size" | "batch" => train.batch_size = value(key, v)?,
        "lr" => train.lr.base = value(key, v)?,
        "warmup" => train.lr.warmup = value(key, v)?,
        "milestones" => train.lr.milestones = list(key, v)?,
        "decay" => train.lr.decay = value(key, v)?,
        "seed" => train.seed = value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Worlds of the action-count grid: `tasks` tasks with `per_task` disjoint
/// actions each, videos as long as the per-task action count.
pub fn grid_world(base: &WorldSpec, tasks: usize, per_task: usize) -> WorldSpec {
    WorldSpec {
        num_tasks: tasks,
        actions: ActionLayout::Disjoint { per_task },
        plans: match &base.plans {
            PlanLayout::Random {
                per_task: n,
                weight_decay,
                ..
            } => PlanLayout::Random {
                per_task: *n,
                video_len: per_task,
                weight_decay: *weight_decay,
            },
            other => other.clone(),
        },
        ..base.clone()
    }
}

/// Ablation config from the file plus flags. Keys prefixed `world.` go to
/// the base world and `classifier.` to classifier training; other unknown
/// keys are treated as denoiser training keys.
pub fn ablation_config(global: &Global) -> Result<AblationConfig> {
    let mut cfg = AblationConfig::default();
    let mut base = WorldSpec::default();
    let mut grid: Option<Vec<usize>> = None;
    let mut grid_per_task = 5usize;
    let mut seeds: Option<Vec<u64>> = None;
    let mut dummy = ClassifierConfig::mlp(1, 1, 1);
    for (k, v) in config_pairs(global)? {
        if let Some(wk) = k.strip_prefix("world.") {
            base.set(wk, &v)?;
        } else if let Some(ck) = k.strip_prefix("classifier.") {
            if !set_classifier(&mut dummy, &mut cfg.classifier, ck, &v)? || dummy.kind != ClassifierKind::Mlp {
                bail!("unsupported ablation classifier key {k:?}");
            }
        } else {
            match k.as_str() {
                "grid" => grid = Some(list(&k, &v)?),
                "grid_per_task" => grid_per_task = value(&k, &v)?,
                "seeds" => seeds = Some(list(&k, &v)?),
                "kinds" => cfg.kinds = list(&k, &v)?,
                "train_instances" => cfg.train_instances = value(&k, &v)?,
                "split_ratio" => cfg.split_ratio = value(&k, &v)?,
                "eval_batch" => cfg.eval_batch = value(&k, &v)?,
                _ => cfg.train.set(&k, &v)?,
            }
        }
    }
    if let Some(h) = global.horizon {
        base.horizon = h as usize;
    }
    cfg.worlds = match grid {
        Some(tasks) => tasks.into_iter().map(|t| grid_world(&base, t, grid_per_task)).collect(),
        None => vec![base],
    };
    if let Some(s) = global.seed {
        cfg.seeds = (s..s + seeds.as_ref().map_or(5, Vec::len) as u64).collect();
    } else if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(m) = global.mask {
        cfg.kinds = vec![m];
    }
    cfg.train.validate()?;
    Ok(cfg)
}
