use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskplan_core::ablation::{run_ablation, AblationReport};
use maskplan_core::checkpoint::{
    load_classifier, load_planner, read_raw, save_classifier, save_planner, DENOISER_MAGIC, FORMAT_VERSION,
};
use maskplan_core::classifier::{train_classifier, ClassifierConfig, ClassifierKind, ClassifierTrainConfig, TaskClassifier};
use maskplan_core::io::{config_hash, read_json, read_jsonl, write_atomic, write_json, write_jsonl, write_meta, TOOL_VERSION};
use maskplan_core::metrics::{group_breakdown, per_horizon, score_distributions, score_plans, MetricsReport};
use maskplan_core::planner::{make_queries, Sampler};
use maskplan_core::trainer::{layout_for, train_diffusion, write_curve_csv, TrainConfig};
use maskplan_core::world::{
    generate_world, group_plan_counts, sample_dataset, split_dataset, GroupKey, PlanInstance, Protocol, Split, World,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::settings::{ablation_config, config_pairs, input_ref, set_classifier, world_spec};
use crate::{Cli, Command, Global, UsageError};

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.jobs.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    pool.install(|| match cli.command {
        Command::GenWorld => gen_world(&g),
        Command::GenData {
            world,
            videos,
            protocol,
            split,
        } => gen_data(&g, &world, videos, &protocol, &split),
        Command::TrainClassifier {
            data,
            world,
            kind,
            no_text,
        } => train_classifier_cmd(&g, &data, &world, kind.as_deref(), no_text),
        Command::TrainDiffusion { data, world, curve } => train_diffusion_cmd(&g, &data, &world, curve),
        Command::Plan {
            model,
            data,
            classifier,
            samples,
            split,
            batch,
        } => plan(&g, &model, &data, classifier.as_deref(), samples, &split, batch),
        Command::Eval { plans, gt, csv } => eval(&g, &plans, &gt, csv.as_deref()),
        Command::Ablate => ablate(&g),
        Command::InspectCheckpoint { path } => inspect(&g, &path),
    })
}

fn out_path(g: &Global, inputs: &[&Path]) -> Result<PathBuf> {
    let out = g.out.clone().ok_or_else(|| UsageError("--out is required".into()))?;
    for i in inputs {
        if out == *i || (out.exists() && i.exists() && out.canonicalize()? == i.canonicalize()?) {
            return Err(UsageError(format!("--out {} would overwrite an input", out.display())).into());
        }
    }
    Ok(out)
}

/// JSON artifact envelope carrying provenance alongside the payload.
#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    tool_version: String,
    config_hash: String,
    #[serde(flatten)]
    body: T,
}

fn envelope<T: Serialize, C: Serialize>(config: &C, body: T) -> Envelope<T> {
    Envelope {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: config_hash(config),
        body,
    }
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    world: World,
}

fn load_world(path: &Path) -> Result<World> {
    let f: Envelope<WorldFile> = read_json(path).with_context(|| format!("reading world {}", path.display()))?;
    Ok(f.body.world)
}

fn gen_world(g: &Global) -> Result<()> {
    let out = out_path(g, &[])?;
    let spec = world_spec(g)?;
    let world = generate_world(&spec)?;
    write_json(&out, &envelope(&spec, WorldFile { world }))?;
    write_meta(&out, &json!({ "command": "gen-world", "world": spec }))?;
    log::info!("wrote world to {}", out.display());
    Ok(())
}

fn gen_data(g: &Global, world_path: &Path, videos: usize, protocol: &str, split: &str) -> Result<()> {
    let out = out_path(g, &[world_path])?;
    let mut world = load_world(world_path)?;
    let mut seed = world.spec.seed;
    let mut ratio = if split == "none" {
        None
    } else {
        Some(split.parse::<f64>().map_err(|_| UsageError(format!("--split {split:?} is not a fraction")))?)
    };
    for (k, v) in config_pairs(g)? {
        match k.as_str() {
            "seed" => seed = v.parse().context("seed")?,
            "split" => ratio = maskplan_core::config::optional(&k, &v)?,
            other => bail!("unknown data key {other:?}"),
        }
    }
    if let Some(s) = g.seed {
        seed = s;
    }
    if let Some(h) = g.horizon {
        let h = h as usize;
        if let Some(short) = world.plans.iter().flatten().find(|p| p.actions.len() < h) {
            bail!("horizon {h} exceeds a video of length {}", short.actions.len());
        }
        world.spec.horizon = h;
    }
    let protocol = match protocol {
        "sliding" | "sliding_window" => Protocol::SlidingWindow,
        _ => Protocol::OnePerVideo,
    };
    let data = sample_dataset(&world, videos, protocol, seed)?;
    let data = match ratio {
        Some(r) => {
            let (mut train, test) = split_dataset(&data, r, seed)?;
            train.extend(test);
            train.sort_by_key(|i| (i.video_id, i.window_index));
            train
        }
        None => data,
    };
    write_jsonl(&out, &data)?;
    let config = json!({
        "command": "gen-data",
        "world": input_ref(world_path)?,
        "videos": videos,
        "protocol": protocol,
        "split": ratio,
        "seed": seed,
        "horizon": world.spec.horizon,
        "instances": data.len(),
    });
    write_meta(&out, &config)?;
    log::info!("wrote {} instances to {}", data.len(), out.display());
    Ok(())
}

fn train_rows(data: &[PlanInstance]) -> Vec<PlanInstance> {
    data.iter().filter(|i| i.split != Some(Split::Test)).cloned().collect()
}

fn test_rows(data: &[PlanInstance]) -> Vec<PlanInstance> {
    data.iter().filter(|i| i.split == Some(Split::Test)).cloned().collect()
}

fn load_data(path: &Path) -> Result<Vec<PlanInstance>> {
    let d: Vec<PlanInstance> = read_jsonl(path).with_context(|| format!("reading data {}", path.display()))?;
    if d.is_empty() {
        bail!("{} holds no instances", path.display());
    }
    Ok(d)
}

fn train_classifier_cmd(g: &Global, data_path: &Path, world_path: &Path, kind: Option<&str>, no_text: bool) -> Result<()> {
    let out = out_path(g, &[data_path, world_path])?;
    let world = load_world(world_path)?;
    let data = load_data(data_path)?;
    let mut cfg = ClassifierConfig::mlp(world.num_tasks(), world.obs_dim(), world.spec.visual_dim);
    let mut tc = ClassifierTrainConfig::default();
    for (k, v) in config_pairs(g)? {
        if !set_classifier(&mut cfg, &mut tc, &k, &v)? {
            bail!("unknown classifier key {k:?}");
        }
    }
    if kind == Some("transformer") {
        cfg.kind = ClassifierKind::Transformer;
    } else if kind == Some("mlp") {
        cfg.kind = ClassifierKind::Mlp;
    }
    if no_text {
        cfg.use_text = false;
    }
    if let Some(s) = g.seed {
        tc.seed = s;
    }
    let train = train_rows(&data);
    let mut clf = TaskClassifier::new(cfg.clone(), tc.seed)?;
    let report = train_classifier(&mut clf, &train, &tc)?;
    let test = test_rows(&data);
    let test_accuracy = if test.is_empty() { None } else { Some(clf.accuracy(&test)?) };
    save_classifier(&out, &clf)?;
    let config = json!({
        "command": "train-classifier",
        "data": input_ref(data_path)?,
        "world": input_ref(world_path)?,
        "model": cfg,
        "training": tc,
    });
    let summary = json!({
        "tool_version": TOOL_VERSION,
        "config_hash": config_hash(&config),
        "config": config,
        "final_loss": report.final_loss,
        "train_accuracy": report.train_accuracy,
        "test_accuracy": test_accuracy,
    });
    write_json(&maskplan_core::io::meta_path(&out), &summary)?;
    log::info!(
        "classifier: train accuracy {:.4}, test accuracy {:?}",
        report.train_accuracy,
        test_accuracy
    );
    Ok(())
}

fn train_diffusion_cmd(g: &Global, data_path: &Path, world_path: &Path, curve: Option<PathBuf>) -> Result<()> {
    let out = out_path(g, &[data_path, world_path])?;
    let world = load_world(world_path)?;
    let data = load_data(data_path)?;
    let mut cfg = TrainConfig::default();
    for (k, v) in config_pairs(g)? {
        cfg.set(&k, &v)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(m) = g.mask {
        cfg.mask = m;
    }
    cfg.validate()?;
    let train = train_rows(&data);
    let test = test_rows(&data);
    let layout = layout_for(&train, world.num_tasks(), world.num_actions)?;
    let eval = if cfg.eval_every > 0 && !test.is_empty() {
        Some(&test[..cfg.eval_instances.min(test.len())])
    } else {
        None
    };
    let (model, report) = train_diffusion(&train, layout, &cfg, eval)?;
    let config = json!({
        "command": "train-diffusion",
        "data": input_ref(data_path)?,
        "world": input_ref(world_path)?,
        "training": cfg,
    });
    save_planner(&out, &model, config.clone())?;
    let curve_path = curve.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".curve.csv");
        PathBuf::from(p)
    });
    write_curve_csv(&curve_path, &report.curve)?;
    write_meta(&curve_path, &config)?;
    let summary = json!({
        "tool_version": TOOL_VERSION,
        "config_hash": config_hash(&config),
        "config": config,
        "final_loss": report.final_loss,
    });
    write_json(&maskplan_core::io::meta_path(&out), &summary)?;
    log::info!("denoiser: final loss {:.6}", report.final_loss);
    Ok(())
}

/// One sampled plan. `index` is the instance's line in the data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    #[serde(default)]
    pub index: Option<usize>,
    #[serde(default)]
    pub sample: u64,
    #[serde(default)]
    pub task: Option<usize>,
    pub actions: Vec<usize>,
    #[serde(default)]
    pub mask: Option<maskplan_core::mask::MaskKind>,
}

#[allow(clippy::too_many_arguments)]
fn plan(
    g: &Global,
    model_path: &Path,
    data_path: &Path,
    clf_path: Option<&Path>,
    samples: u64,
    split: &str,
    batch: usize,
) -> Result<()> {
    let mut inputs = vec![model_path, data_path];
    inputs.extend(clf_path);
    let out = out_path(g, &inputs)?;
    if samples == 0 {
        return Err(UsageError("--samples must be positive".into()).into());
    }
    let (model, _) = load_planner(model_path)?;
    let clf = clf_path.map(load_classifier).transpose()?.map(|(c, _)| c);
    let data = load_data(data_path)?;
    let tagged = data.iter().any(|i| i.split.is_some());
    let picked: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let inst = &data[i];
            let side = match split {
                "train" => !tagged || inst.split == Some(Split::Train),
                "test" => !tagged || inst.split == Some(Split::Test),
                _ => true,
            };
            side && g.horizon.is_none_or(|h| inst.horizon() == h as usize)
        })
        .collect();
    if picked.is_empty() {
        bail!("no instances selected from {}", data_path.display());
    }
    let instances: Vec<PlanInstance> = picked.iter().map(|&i| data[i].clone()).collect();
    let kind = g.mask.unwrap_or(model.trained_with);
    let steps = g
        .ddim_steps
        .unwrap_or((model.schedule.steps() / 5).max(1));
    let sampler_name = g.sampler.as_deref().unwrap_or("ddpm");
    let sampler = Sampler::parse(sampler_name, steps, g.eta.unwrap_or(1.0))?;
    let seed = g.seed.unwrap_or(0);
    let mut queries = make_queries(&model, &instances, clf.as_ref(), kind)?;
    for (q, &i) in queries.iter_mut().zip(&picked) {
        q.id = i as u64;
    }
    let mut records = Vec::with_capacity(queries.len() * samples as usize);
    for s in 0..samples {
        let out = model.sample_all(&queries, sampler, seed, s, batch)?;
        records.extend(out.into_iter().zip(&picked).map(|(p, &i)| PlanRecord {
            index: Some(i),
            sample: s,
            task: Some(p.label),
            actions: p.actions,
            mask: Some(p.mask_kind),
        }));
    }
    records.sort_by_key(|r| (r.index, r.sample));
    write_jsonl(&out, &records)?;
    let mut config = json!({
        "command": "plan",
        "model": input_ref(model_path)?,
        "data": input_ref(data_path)?,
        "mask": kind,
        "sampler": sampler,
        "samples": samples,
        "split": split,
        "horizon": g.horizon,
        "seed": seed,
    });
    if let Some(p) = clf_path {
        config["classifier"] = serde_json::to_value(input_ref(p)?)?;
    }
    write_meta(&out, &config)?;
    log::info!("wrote {} plans to {}", records.len(), out.display());
    Ok(())
}

fn eval(g: &Global, plans_path: &Path, gt_path: &Path, csv: Option<&Path>) -> Result<()> {
    let out = out_path(g, &[plans_path, gt_path])?;
    let plans: Vec<PlanRecord> = read_jsonl(plans_path)?;
    let gt: Vec<PlanInstance> = read_jsonl(gt_path)?;
    if plans.is_empty() {
        bail!("{} holds no plans", plans_path.display());
    }
    let indexed = plans.iter().all(|p| p.index.is_some());
    if !indexed && plans.len() != gt.len() {
        bail!(
            "{} unindexed plans cannot be matched to {} ground-truth rows",
            plans.len(),
            gt.len()
        );
    }
    let mut pairs: Vec<(&PlanRecord, &PlanInstance)> = Vec::with_capacity(plans.len());
    for (pos, p) in plans.iter().enumerate() {
        let i = p.index.unwrap_or(pos);
        let inst = gt
            .get(i)
            .with_context(|| format!("plan refers to row {i}; ground truth has {}", gt.len()))?;
        if g.horizon.is_none_or(|h| inst.horizon() == h as usize) {
            pairs.push((p, inst));
        }
    }
    let first: Vec<&(&PlanRecord, &PlanInstance)> = pairs.iter().filter(|(p, _)| p.sample == 0).collect();
    if first.is_empty() {
        bail!("no plans with sample index 0 to score");
    }
    let pred: Vec<Vec<usize>> = first.iter().map(|(p, _)| p.actions.clone()).collect();
    let truth: Vec<Vec<usize>> = first.iter().map(|(_, i)| i.actions.clone()).collect();
    let scores = score_plans(&pred, &truth)?;
    let horizons = per_horizon(&pred, &truth)?;

    let (distribution, groups) = if pairs.iter().any(|(p, _)| p.sample > 0) {
        let mut samples: BTreeMap<GroupKey, Vec<Vec<usize>>> = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        let mut referenced = Vec::new();
        for (p, inst) in &pairs {
            samples.entry(inst.group_key()).or_default().push(p.actions.clone());
            if seen.insert(*inst as *const PlanInstance) {
                referenced.push((*inst).clone());
            }
        }
        let gtd = group_plan_counts(&referenced);
        (Some(score_distributions(&samples, &gtd)?), group_breakdown(&samples, &gtd))
    } else {
        (None, Vec::new())
    };
    let config = json!({
        "command": "eval",
        "plans": input_ref(plans_path)?,
        "gt": input_ref(gt_path)?,
        "horizon": g.horizon,
    });
    let report = MetricsReport {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: config_hash(&config),
        plans: scores,
        distribution,
        per_horizon: horizons,
        groups,
    };
    write_json(&out, &report)?;
    write_meta(&out, &config)?;
    if let Some(c) = csv {
        let mut s = String::from("model,sr,macc,miou,count");
        let d = report.distribution;
        if d.is_some() {
            s.push_str(",nll,kl,mode_prec,mode_rec");
        }
        s.push('\n');
        let name = plans_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        s.push_str(&format!("{name},{},{},{},{}", scores.sr, scores.macc, scores.miou, scores.count));
        if let Some(d) = d {
            s.push_str(&format!(",{},{},{},{}", d.nll, d.kl, d.mode_prec, d.mode_rec));
        }
        s.push('\n');
        write_atomic(c, s.as_bytes())?;
        write_meta(c, &config)?;
    }
    println!("SR {:.4}  mAcc {:.4}  mIoU {:.4}  (n = {})", scores.sr, scores.macc, scores.miou, scores.count);
    if let Some(d) = report.distribution {
        println!(
            "NLL {:.4}  KL {:.4}  ModePrec {:.4}  ModeRec {:.4}",
            d.nll, d.kl, d.mode_prec, d.mode_rec
        );
    }
    Ok(())
}

fn ablate(g: &Global) -> Result<()> {
    let dir = out_path(g, &[])?;
    let mut cfg = ablation_config(g)?;
    if let Some(name) = &g.sampler {
        let steps = g.ddim_steps.unwrap_or((cfg.train.diffusion_steps / 5).max(1));
        cfg.sampler = Sampler::parse(name, steps, g.eta.unwrap_or(1.0))?;
    }
    let report = run_ablation(&cfg, |c| {
        log::info!(
            "world {} (L_a = {}) seed {} {}: SR {:.4}",
            c.world,
            c.action_dim,
            c.seed,
            c.kind,
            c.scores.sr
        )
    })?;
    write_ablation(&dir, &cfg, &report)
}

fn write_ablation(dir: &Path, cfg: &maskplan_core::ablation::AblationConfig, report: &AblationReport) -> Result<()> {
    let json_path = dir.join("ablation.json");
    write_json(&json_path, &envelope(cfg, report))?;
    write_meta(&json_path, cfg)?;

    // Rows are mask kinds, columns world sizes.
    let mut table = String::from("mask");
    for w in &report.summary {
        table.push_str(&format!(",sr_la{}", w.action_dim));
    }
    table.push('\n');
    for kind in &cfg.kinds {
        table.push_str(&kind.to_string());
        for w in &report.summary {
            match w.mean_sr.get(kind) {
                Some(v) => table.push_str(&format!(",{v}")),
                None => table.push(','),
            }
        }
        table.push('\n');
    }
    let table_path = dir.join("ablation.csv");
    write_atomic(&table_path, table.as_bytes())?;
    write_meta(&table_path, cfg)?;

    let mut gap = String::from("action_dim,gap_hard_none\n");
    for w in &report.summary {
        gap.push_str(&format!(
            "{},{}\n",
            w.action_dim,
            w.gap_hard_none.map_or(String::new(), |v| v.to_string())
        ));
    }
    let gap_path = dir.join("gap.csv");
    write_atomic(&gap_path, gap.as_bytes())?;
    write_meta(&gap_path, cfg)?;
    print!("{table}");
    Ok(())
}

fn inspect(g: &Global, path: &Path) -> Result<()> {
    let (magic, header, data) = read_raw(path)?;
    let kind = if &magic == DENOISER_MAGIC { "denoiser" } else { "classifier" };
    let scalars: usize = header.manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let summary = json!({
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "tool_version": header.tool_version,
        "config_hash": header.config_hash,
        "parameters": scalars,
        "payload_bytes": data.len(),
        "tensors": header.manifest.iter().map(|(n, s)| json!({"name": n, "shape": s})).collect::<Vec<_>>(),
        "config": header.config,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    match &g.out {
        Some(out) => {
            if out == path {
                return Err(UsageError("--out would overwrite the checkpoint".into()).into());
            }
            write_atomic(out, format!("{text}\n").as_bytes())?
        }
        None => println!("{text}"),
    }
    Ok(())
}
