//! Generator checkpoints in the container archive format.
//!
//! Saving writes every tensor under its registry name plus a manifest with
//! the architecture, iteration, and config hash. Loading is strict: a
//! missing, surplus, or misshapen array aborts instead of producing a
//! half-initialized generator.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::mapping::{Linear, MappingNetwork};
use super::synthesis::SynthesisLayer;
use super::{Architecture, StyleGenerator};

#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub config_hash: String,
    pub arch: Architecture,
}

impl CheckpointMeta {
    /// Guards resumption against a silently edited config.
    pub fn expect_config_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                found: self.config_hash.clone(),
                expected: expected.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CheckpointSnapshot {
    pub iteration: u64,
    pub path: PathBuf,
    pub config_hash: String,
    pub grid_path: Option<PathBuf>,
}

pub fn save_checkpoint(
    gen: &StyleGenerator,
    iteration: u64,
    config_hash: &str,
    path: &Path,
) -> Result<CheckpointSnapshot> {
    let manifest = json!({
        "kind": "generator",
        "iteration": iteration,
        "config_hash": config_hash,
        "arch": serde_json::to_value(gen.architecture()).expect("architecture serializes"),
    });
    container::write_archive(path, &manifest, &gen.named_tensors())?;
    Ok(CheckpointSnapshot {
        iteration,
        path: path.to_path_buf(),
        config_hash: config_hash.to_string(),
        grid_path: None,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(StyleGenerator, CheckpointMeta)> {
    let (manifest, params) = container::read_archive(path)?;
    if manifest.get("kind") != Some(&json!("generator")) {
        return Err(Error::checkpoint(path, "container is not a generator checkpoint"));
    }
    let iteration = manifest
        .get("iteration")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::checkpoint(path, "manifest missing iteration"))?;
    let config_hash = manifest
        .get("config_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::checkpoint(path, "manifest missing config_hash"))?
        .to_string();
    let arch: Architecture = manifest
        .get("arch")
        .cloned()
        .ok_or_else(|| Error::checkpoint(path, "manifest missing arch"))
        .and_then(|v| {
            serde_json::from_value(v)
                .map_err(|e| Error::checkpoint(path, format!("bad arch: {e}")))
        })?;
    arch.validate()
        .map_err(|e| Error::checkpoint(path, format!("bad arch: {e}")))?;

    let mut map: HashMap<String, Tensor> = HashMap::with_capacity(params.len());
    for (name, tensor) in params {
        if map.insert(name.clone(), tensor).is_some() {
            return Err(Error::checkpoint(path, format!("duplicate parameter {name:?}")));
        }
    }
    let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor> {
        let t = map
            .remove(&name)
            .ok_or_else(|| Error::checkpoint(path, format!("missing parameter {name:?}")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::checkpoint(
                path,
                format!("{name:?} has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    };

    let (zd, wd) = (arch.z_dim, arch.w_dim);
    let mapping = MappingNetwork {
        fc: vec![
            Linear {
                weight: take("mapping.fc0.weight".into(), vec![wd, zd])?,
                bias: take("mapping.fc0.bias".into(), vec![wd])?,
            },
            Linear {
                weight: take("mapping.fc1.weight".into(), vec![wd, wd])?,
                bias: take("mapping.fc1.bias".into(), vec![wd])?,
            },
        ],
        z_dim: zd,
        w_dim: wd,
    };
    let w_avg = take("w_avg".into(), vec![wd])?;
    let base = arch.base_resolution;
    let const_input = take("const_input".into(), vec![arch.channels[0], base, base])?;

    let mut layers = Vec::with_capacity(arch.num_layers());
    for i in 0..arch.num_layers() {
        let ci = if i == 0 { arch.channels[0] } else { arch.channels[i - 1] };
        let co = arch.channels[i];
        let res = arch.layer_resolution(i);
        layers.push(SynthesisLayer {
            affine: Linear {
                weight: take(format!("layer{i}.affine.weight"), vec![ci, wd])?,
                bias: take(format!("layer{i}.affine.bias"), vec![ci])?,
            },
            conv_weight: take(format!("layer{i}.conv.weight"), vec![co, ci, 3, 3])?,
            conv_bias: take(format!("layer{i}.conv.bias"), vec![co])?,
            noise_strength: take(format!("layer{i}.noise.strength"), vec![1])?,
            noise_const: take(format!("layer{i}.noise.const"), vec![1, 1, res, res])?,
            rgb_affine: Linear {
                weight: take(format!("layer{i}.torgb.affine.weight"), vec![co, wd])?,
                bias: take(format!("layer{i}.torgb.affine.bias"), vec![co])?,
            },
            rgb_weight: take(format!("layer{i}.torgb.weight"), vec![3, co, 1, 1])?,
            rgb_bias: take(format!("layer{i}.torgb.bias"), vec![3])?,
            resolution: res,
            upsample: i > 0,
        });
    }
    if let Some(stranger) = map.keys().next() {
        return Err(Error::checkpoint(
            path,
            format!("unmapped parameter {stranger:?}"),
        ));
    }

    let gen = StyleGenerator::from_parts(arch.clone(), mapping, w_avg, const_input, layers);
    Ok((
        gen,
        CheckpointMeta {
            iteration,
            config_hash,
            arch,
        },
    ))
}
