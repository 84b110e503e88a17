//! Binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! JSON header, then the parameters as LE `f64` in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use maskplan_tensor::ParamStore;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, TaskClassifier};
use crate::diffusion::make_schedule;
use crate::error::{Error, Result};
use crate::io::{config_hash, write_atomic, TOOL_VERSION};
use crate::mask::{MaskKind, ProjectionConfig, StateLayout, TaskMasks};
use crate::planner::PlannerModel;
use crate::unet::{Denoiser, UNetConfig};

pub const DENOISER_MAGIC: &[u8; 8] = b"MPDUNET\0";
pub const CLASSIFIER_MAGIC: &[u8; 8] = b"MPDCLSF\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool_version: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub manifest: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub unet: UNetConfig,
    pub layout: StateLayout,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub boundary_weight: f64,
    pub trained_with: MaskKind,
    pub masks: BTreeMap<usize, Vec<usize>>,
    /// Training config snapshot, informational.
    #[serde(default)]
    pub training: serde_json::Value,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.into(),
        reason: reason.into(),
    }
}

fn encode(magic: &[u8; 8], config: serde_json::Value, params: &ParamStore) -> Vec<u8> {
    let header = Header {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: config_hash(&config),
        config,
        manifest: params.manifest(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(20 + json.len() + params.num_scalars() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&params.to_le_bytes());
    out
}

/// Reads any checkpoint, returning its magic, header, and parameter bytes.
pub fn read_raw(path: &Path) -> Result<([u8; 8], Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 {
        return Err(bad(path, "file too short"));
    }
    let magic: [u8; 8] = bytes[..8].try_into().expect("8 bytes");
    if &magic != DENOISER_MAGIC && &magic != CLASSIFIER_MAGIC {
        return Err(bad(path, "unknown magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 20 + hlen {
        return Err(bad(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + hlen]).map_err(|e| bad(path, e.to_string()))?;
    Ok((magic, header, bytes[20 + hlen..].to_vec()))
}

fn load_params(path: &Path, header: &Header, params: &mut ParamStore, data: &[u8]) -> Result<()> {
    if params.manifest() != header.manifest {
        return Err(bad(path, "parameter manifest does not match the stored config"));
    }
    params.load_le_bytes(data).map_err(|e| bad(path, e.to_string()))
}

pub fn save_planner(path: &Path, model: &PlannerModel, training: serde_json::Value) -> Result<()> {
    let s = &model.schedule;
    let meta = DenoiserMeta {
        unet: model.denoiser.config.clone(),
        layout: model.denoiser.layout,
        diffusion_steps: model.denoiser.diffusion_steps,
        beta_start: s.betas[0],
        beta_end: s.betas[s.betas.len() - 1],
        boundary_weight: model.projection.boundary_weight,
        trained_with: model.trained_with,
        masks: model.masks.to_table(),
        training,
    };
    let config = serde_json::to_value(&meta).expect("meta serialises");
    write_atomic(path, &encode(DENOISER_MAGIC, config, &model.denoiser.params))
}

pub fn load_planner(path: &Path) -> Result<(PlannerModel, Header)> {
    let (magic, header, data) = read_raw(path)?;
    if &magic != DENOISER_MAGIC {
        return Err(bad(path, "not a denoiser checkpoint"));
    }
    let meta: DenoiserMeta = serde_json::from_value(header.config.clone()).map_err(|e| bad(path, e.to_string()))?;
    let mut denoiser = Denoiser::new(meta.unet, meta.layout, meta.diffusion_steps, 0)?;
    load_params(path, &header, &mut denoiser.params, &data)?;
    let model = PlannerModel {
        denoiser,
        schedule: make_schedule(meta.diffusion_steps, meta.beta_start, meta.beta_end)?,
        projection: ProjectionConfig::new(meta.boundary_weight)?,
        masks: TaskMasks::from_table(&meta.masks, meta.layout.action_dim)?,
        trained_with: meta.trained_with,
    };
    Ok((model, header))
}

pub fn save_classifier(path: &Path, model: &TaskClassifier) -> Result<()> {
    let config = serde_json::to_value(&model.config).expect("config serialises");
    write_atomic(path, &encode(CLASSIFIER_MAGIC, config, &model.params))
}

pub fn load_classifier(path: &Path) -> Result<(TaskClassifier, Header)> {
    let (magic, header, data) = read_raw(path)?;
    if &magic != CLASSIFIER_MAGIC {
        return Err(bad(path, "not a classifier checkpoint"));
    }
    let cfg: ClassifierConfig = serde_json::from_value(header.config.clone()).map_err(|e| bad(path, e.to_string()))?;
    let mut model = TaskClassifier::new(cfg, 0)?;
    load_params(path, &header, &mut model.params, &data)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::build_task_masks;
    use crate::world::PlanInstance;

    fn planner() -> PlannerModel {
        let layout = StateLayout {
            task_dim: 2,
            action_dim: 4,
            obs_dim: 3,
            horizon: 3,
        };
        let inst = |task, actions| PlanInstance {
            task,
            actions,
            obs_start: vec![0.0; 3],
            obs_goal: vec![0.0; 3],
            video_id: 0,
            window_index: 0,
            split: None,
        };
        let cfg = UNetConfig {
            channels: [4, 8, 8],
            embed_dim: 4,
            embed_hidden: 4,
            norm_eps: 1e-5,
        };
        PlannerModel {
            denoiser: Denoiser::new(cfg, layout, 5, 3).unwrap(),
            schedule: make_schedule(5, 1e-4, 0.02).unwrap(),
            projection: ProjectionConfig::default(),
            masks: build_task_masks(&[inst(0, vec![0, 1, 0]), inst(1, vec![2, 3, 3])], 2, 4).unwrap(),
            trained_with: MaskKind::Hard,
        }
    }

    #[test]
    fn planner_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = planner();
        save_planner(&p, &m, serde_json::json!({"steps": 1})).unwrap();
        let (back, header) = load_planner(&p).unwrap();
        assert_eq!(back.denoiser.params.to_le_bytes(), m.denoiser.params.to_le_bytes());
        assert_eq!(back.masks, m.masks);
        assert_eq!(back.schedule, m.schedule);
        assert_eq!(header.tool_version, TOOL_VERSION);
        assert_eq!(&fs::read(&p).unwrap()[..8], DENOISER_MAGIC);
        let bytes = fs::read(&p).unwrap();
        save_planner(&p, &m, serde_json::json!({"steps": 1})).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
        assert!(load_classifier(&p).is_err());
    }

    #[test]
    fn classifier_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let m = TaskClassifier::new(ClassifierConfig::transformer(3, 4, 2), 1).unwrap();
        save_classifier(&p, &m).unwrap();
        let (back, _) = load_classifier(&p).unwrap();
        assert_eq!(back.params.to_le_bytes(), m.params.to_le_bytes());
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_classifier(&p), Err(Error::Checkpoint { .. })));
        fs::write(&p, b"garbage-garbage-garbage").unwrap();
        assert!(load_classifier(&p).is_err());
    }
}
