//! Checkpoint directories: `manifest.json` plus one MPT1 file per tensor.
//!
//! Tensor files live under one folder per group (`params/`, `opt_g_m/`,
//! `opt_g_v/`, `opt_d_m/`, `opt_d_v/`), named after the tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, OptimizerState, TrainConfig};
use crate::arch::{VariantKind, DISC_PREFIX};
use crate::data::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "mpsynth-checkpoint-1";
const MANIFEST: &str = "manifest.json";
const GROUPS: [&str; 5] = ["params", "opt_g_m", "opt_g_v", "opt_d_m", "opt_d_v"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub variant: VariantKind,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub opt_g_step: u64,
    pub opt_d_step: u64,
    /// Epoch shuffles are drawn from (seed, epoch); resuming at `epoch`
    /// restores the shuffle stream exactly.
    pub shuffle_seed: u64,
    pub tensors: Vec<TensorEntry>,
}

fn groups(model: &Model) -> [(&'static str, Vec<(&String, &Tensor<f32>)>); 5] {
    let mut params: Vec<_> = model.generator.iter().collect();
    params.extend(model.discriminator.iter());
    params.sort_by(|a, b| a.0.cmp(b.0));
    [
        (GROUPS[0], params),
        (GROUPS[1], model.opt_g.m.iter().collect()),
        (GROUPS[2], model.opt_g.v.iter().collect()),
        (GROUPS[3], model.opt_d.m.iter().collect()),
        (GROUPS[4], model.opt_d.v.iter().collect()),
    ]
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for (group, items) in groups(model) {
        let gdir = dir.join(group);
        fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
        for (name, t) in items {
            let file = format!("{group}/{name}.mpt");
            write_tensor(&dir.join(&file), t)?;
            tensors.push(TensorEntry {
                group: group.to_string(),
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        variant: model.variant(),
        epoch: model.epoch,
        config: model.config.clone(),
        opt_g_step: model.opt_g.t,
        opt_d_step: model.opt_d.t,
        shuffle_seed: model.config.seed,
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint; with `expect` set, a different stored variant is an error.
pub fn load_checkpoint(dir: &Path, expect: Option<VariantKind>) -> Result<Model> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {:?}", m.format)));
    }
    if let Some(want) = expect {
        if want != m.variant {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds variant {}, but variant {} was requested",
                m.variant, want
            )));
        }
    }
    if m.config.variant != m.variant {
        return Err(Error::Checkpoint("manifest variant disagrees with its config".into()));
    }
    let mut model = Model::new(m.config.clone())?;
    let expected = model.generator.names().chain(model.discriminator.names()).cloned().collect::<Vec<_>>();
    let mut loaded: BTreeMap<&str, BTreeMap<String, Tensor<f32>>> = GROUPS.iter().map(|g| (*g, BTreeMap::new())).collect();
    for e in &m.tensors {
        let Some(group) = loaded.get_mut(e.group.as_str()) else {
            return Err(Error::Checkpoint(format!("tensor {} has unknown group {:?}", e.name, e.group)));
        };
        let file = dir.join(&e.file);
        if !file.is_file() {
            return Err(Error::Checkpoint(format!("tensor {} ({}): file missing", e.name, e.file)));
        }
        let t = read_tensor(&file).map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: shape {:?} does not match manifest {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
        group.insert(e.name.clone(), t);
    }
    let mut params = loaded.remove("params").expect("group exists");
    for name in expected {
        let t = params
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from checkpoint")))?;
        let store: &mut ParamStore<f32> = if name.starts_with(DISC_PREFIX) {
            &mut model.discriminator
        } else {
            &mut model.generator
        };
        let slot = store.get_mut(&name)?;
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::Checkpoint(format!("tensor {extra} is not part of variant {}", m.variant)));
    }
    let mut take = |g: &str| loaded.remove(g).expect("group exists");
    model.opt_g = OptimizerState {
        t: m.opt_g_step,
        m: take("opt_g_m"),
        v: take("opt_g_v"),
    };
    model.opt_d = OptimizerState {
        t: m.opt_d_step,
        m: take("opt_d_m"),
        v: take("opt_d_v"),
    };
    model.epoch = m.epoch;
    Ok(model)
}
