//! Checkpoints: a JSON manifest `X.json` next to a raw blob `X.bin` of
//! little-endian `f64` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model, ModelParams, Param, ParamGroup};
use crate::tensor::{Role, Tensor};
use crate::trainer::{Strategy, TrainConfig, TrainState};

const FORMAT: &str = "trackdepth-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub arch: ArchConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub strategy: Strategy,
    pub step: u64,
    /// First and second Adam moments, indexed like the parameters.
    pub moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        Checkpoint {
            model: state.model.clone(),
            strategy: state.strategy,
            step: state.step,
            moments: Some((state.adam_m.clone(), state.adam_v.clone())),
            config: Some(cfg.clone()),
        }
    }

    /// Tracking-only checkpoint without optimizer state.
    pub fn exported(model: &Model, strategy: Strategy, step: u64) -> Self {
        Checkpoint {
            model: model.export_inference(),
            strategy,
            step,
            moments: None,
            config: None,
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let (adam_m, adam_v) = self
            .moments
            .ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
        Ok(TrainState {
            model: self.model,
            strategy: self.strategy,
            step: self.step,
            adam_m,
            adam_v,
        })
    }

    pub fn blob_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bin")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.model.params.params();
        let mut blob: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        let mut put = |name: &str, kind, group, t: &Tensor, blob: &mut Vec<u8>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                group,
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for &v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in params {
            put(&p.name, TensorKind::Param, p.group, &p.value, &mut blob);
        }
        if let Some((m, v)) = &self.moments {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
            }
            for (p, t) in params.iter().zip(m) {
                put(&p.name, TensorKind::AdamM, p.group, t, &mut blob);
            }
            for (p, t) in params.iter().zip(v) {
                put(&p.name, TensorKind::AdamV, p.group, t, &mut blob);
            }
        }
        let blob_path = Self::blob_path(path);
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            version: VERSION,
            blob: blob_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            arch: self.model.arch.clone(),
            strategy: self.strategy,
            seed: self.model.params.seed,
            step: self.step,
            config: self.config.clone(),
            tensors,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint format {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        m.arch.validate()?;
        let blob_path = path.with_file_name(&m.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let read = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            if end > blob.len() {
                return Err(Error::Format(format!("tensor {} runs past the blob", e.name)));
            }
            let data = blob[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::new(e.shape.clone(), data)
        };
        let mut params = Vec::new();
        let mut mm = Vec::new();
        let mut vv = Vec::new();
        for e in &m.tensors {
            let t = read(e)?;
            match e.kind {
                TensorKind::Param => params.push(Param {
                    name: e.name.clone(),
                    group: e.group,
                    value: t.with_role(Role::Params),
                }),
                TensorKind::AdamM => mm.push(t),
                TensorKind::AdamV => vv.push(t),
            }
        }
        let reference = ModelParams::init(&m.arch, 0)?;
        for p in &params {
            match reference.get(&p.name) {
                Some(r) if r.shape() == p.value.shape() => {}
                _ => {
                    return Err(Error::Format(format!(
                        "parameter {} {:?} does not fit the architecture",
                        p.name,
                        p.value.shape()
                    )))
                }
            }
        }
        let moments = if mm.is_empty() && vv.is_empty() {
            None
        } else if mm.len() == params.len() && vv.len() == params.len() {
            Some((mm, vv))
        } else {
            return Err(Error::Format("incomplete optimizer state".into()));
        };
        let model = Model::from_parts(m.arch, ModelParams::from_params(params, m.seed));
        Ok(Checkpoint {
            model,
            strategy: m.strategy,
            step: m.step,
            moments,
            config: m.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ArchConfig::tiny(), 3).unwrap();
        let mut state = TrainState::new(model, Strategy::SelfSupAux);
        state.step = 17;
        state.adam_m[0].data_mut()[0] = 0.25;
        let cfg = TrainConfig::default();
        let a = dir.path().join("a.json");
        Checkpoint::from_state(&state, &cfg).save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded.model, state.model);
        assert_eq!(loaded.step, 17);
        let b = dir.path().join("b.json");
        loaded.save(&b).unwrap();
        let strip = |s: String| s.replace("a.bin", "").replace("b.bin", "");
        assert_eq!(
            strip(fs::read_to_string(&a).unwrap()),
            strip(fs::read_to_string(&b).unwrap())
        );
        assert_eq!(fs::read(dir.path().join("a.bin")).unwrap(), fs::read(dir.path().join("b.bin")).unwrap());
        let st = loaded.into_state().unwrap();
        assert_eq!(st, state);
    }

    #[test]
    fn exported_checkpoint_has_no_aux_groups() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ArchConfig::tiny(), 3).unwrap();
        let p = dir.path().join("e.json");
        Checkpoint::exported(&model, Strategy::SelfSupAux, 5).save(&p).unwrap();
        let c = Checkpoint::load(&p).unwrap();
        assert!(!c.model.has_depth_head() && !c.model.has_pose_net());
        assert!(c.moments.is_none());
        assert!(c.into_state().is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ArchConfig::tiny(), 3).unwrap();
        let p = dir.path().join("t.json");
        Checkpoint::exported(&model, Strategy::TrackOnlyLarge, 0).save(&p).unwrap();
        let bin = dir.path().join("t.bin");
        let data = fs::read(&bin).unwrap();
        fs::write(&bin, &data[..data.len() / 2]).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
