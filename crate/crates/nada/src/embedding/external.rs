//! Adapter for externally prepared encoder checkpoints.
//!
//! A checkpoint is the standard container archive holding a manifest
//! (name, dimension, input resolution, preprocessing, prompt list) plus two
//! arrays: `image_projection` `[dim, 3*R*R]` and `text_embeddings`
//! `[n_prompts, dim]`. Converting a full pretrained encoder into this form
//! is an installation step done with external tooling; this module only
//! consumes the result. Loading is strict: wrong, missing, or surplus arrays
//! abort rather than half-initialize.
//!
//! Checkpoints are resolved as `$NADA_CACHE_DIR/<identifier>.enc`.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::container;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{normalize_in_place, Tensor};

use super::{EmbeddingBackend, LinearImageEncoder, Preprocessing, DIRECTION_EPS};

pub const CACHE_ENV: &str = "NADA_CACHE_DIR";

pub struct ExternalBackend {
    name: String,
    resolution: usize,
    pre: Preprocessing,
    encoder: LinearImageEncoder,
    prompts: Vec<String>,
    /// `[n_prompts, dim]`, unit rows.
    text: Tensor,
    dim: usize,
}

fn manifest_field<'v>(m: &'v serde_json::Value, key: &str, path: &Path) -> Result<&'v serde_json::Value> {
    m.get(key)
        .ok_or_else(|| Error::checkpoint(path, format!("manifest missing {key:?}")))
}

fn three_vector(v: &serde_json::Value, key: &str, path: &Path) -> Result<[f64; 3]> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| Error::checkpoint(path, format!("{key} must be a 3-element array")))?;
    let mut out = [0.0; 3];
    for (i, x) in arr.iter().enumerate() {
        out[i] = x
            .as_f64()
            .ok_or_else(|| Error::checkpoint(path, format!("{key}[{i}] is not a number")))?;
    }
    Ok(out)
}

impl ExternalBackend {
    /// Where `identifier` lives under the cache directory.
    pub fn cache_path(identifier: &str) -> Result<PathBuf> {
        if identifier.is_empty() || identifier.contains(['/', '\\']) {
            return Err(Error::UnknownBackend(identifier.to_string()));
        }
        let dir = std::env::var_os(CACHE_ENV).ok_or(Error::CacheDirUnset)?;
        Ok(PathBuf::from(dir).join(format!("{identifier}.enc")))
    }

    pub fn load(identifier: &str) -> Result<Self> {
        Self::load_from(&Self::cache_path(identifier)?)
    }

    pub fn load_from(path: &Path) -> Result<Self> {
        let (manifest, params) = container::read_archive(path)?;
        let kind = manifest_field(&manifest, "kind", path)?;
        if kind != "encoder" {
            return Err(Error::checkpoint(
                path,
                format!("container kind {kind} is not an encoder"),
            ));
        }
        let name = manifest_field(&manifest, "name", path)?
            .as_str()
            .ok_or_else(|| Error::checkpoint(path, "name must be a string"))?
            .to_string();
        let dim = manifest_field(&manifest, "dimension", path)?
            .as_u64()
            .filter(|&d| d >= 1)
            .ok_or_else(|| Error::checkpoint(path, "dimension must be a positive integer"))?
            as usize;
        let resolution = manifest_field(&manifest, "input_resolution", path)?
            .as_u64()
            .filter(|&r| r >= 1)
            .ok_or_else(|| Error::checkpoint(path, "input_resolution must be a positive integer"))?
            as usize;
        let mean = three_vector(manifest_field(&manifest, "mean", path)?, "mean", path)?;
        let std = three_vector(manifest_field(&manifest, "std", path)?, "std", path)?;
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::checkpoint(path, "std components must be positive"));
        }
        let prompts: Vec<String> = manifest_field(&manifest, "prompts", path)?
            .as_array()
            .ok_or_else(|| Error::checkpoint(path, "prompts must be an array"))?
            .iter()
            .map(|p| {
                p.as_str()
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .ok_or_else(|| Error::checkpoint(path, "prompts must be non-empty strings"))
            })
            .collect::<Result<_>>()?;

        let mut projection = None;
        let mut text = None;
        for (pname, tensor) in params {
            match pname.as_str() {
                "image_projection" => projection = Some(tensor),
                "text_embeddings" => text = Some(tensor),
                other => {
                    return Err(Error::checkpoint(
                        path,
                        format!("unmapped parameter {other:?}"),
                    ))
                }
            }
        }
        let projection =
            projection.ok_or_else(|| Error::checkpoint(path, "missing image_projection"))?;
        let mut text = text.ok_or_else(|| Error::checkpoint(path, "missing text_embeddings"))?;

        if projection.shape() != [dim, 3 * resolution * resolution] {
            return Err(Error::checkpoint(
                path,
                format!(
                    "image_projection shape {:?} does not match dimension {dim} at resolution {resolution}",
                    projection.shape()
                ),
            ));
        }
        if text.shape() != [prompts.len(), dim] {
            return Err(Error::checkpoint(
                path,
                format!(
                    "text_embeddings shape {:?} does not match {} prompts of dimension {dim}",
                    text.shape(),
                    prompts.len()
                ),
            ));
        }
        for i in 0..prompts.len() {
            let norm = normalize_in_place(text.row_mut(i));
            if norm < DIRECTION_EPS {
                return Err(Error::checkpoint(
                    path,
                    format!("text embedding for {:?} is zero", prompts[i]),
                ));
            }
        }

        let pre = Preprocessing { mean, std };
        let encoder = LinearImageEncoder::new(&projection, resolution, pre.clone())?;
        Ok(ExternalBackend {
            name,
            resolution,
            pre,
            encoder,
            prompts,
            text,
            dim,
        })
    }

    /// Write a checkpoint in the format [`load_from`](Self::load_from)
    /// consumes. `entries` pairs each prompt with its embedding.
    pub fn export(
        path: &Path,
        name: &str,
        input_resolution: usize,
        pre: &Preprocessing,
        projection: &Tensor,
        entries: &[(String, Vec<f64>)],
    ) -> Result<()> {
        let dim = projection.shape()[0];
        let mut text = Tensor::zeros(vec![entries.len(), dim]);
        for (i, (_, values)) in entries.iter().enumerate() {
            if values.len() != dim {
                return Err(Error::shape(format!("[{dim}]"), &[values.len()][..]));
            }
            text.row_mut(i).copy_from_slice(values);
        }
        let manifest = json!({
            "kind": "encoder",
            "name": name,
            "dimension": dim,
            "input_resolution": input_resolution,
            "mean": pre.mean,
            "std": pre.std,
            "prompts": entries.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>(),
        });
        container::write_archive(
            path,
            &manifest,
            &[
                ("image_projection".to_string(), projection.clone()),
                ("text_embeddings".to_string(), text),
            ],
        )
    }
}

impl EmbeddingBackend for ExternalBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn input_resolution(&self) -> usize {
        self.resolution
    }

    fn preprocessing(&self) -> &Preprocessing {
        &self.pre
    }

    fn embed_text(&self, prompt: &str) -> Result<Tensor> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let idx = self
            .prompts
            .iter()
            .position(|p| p == prompt)
            .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))?;
        Ok(Tensor::new(vec![self.dim], self.text.row(idx).to_vec()))
    }

    fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        self.encoder
            .embed_value(image)?
            .ok_or(Error::DegenerateEmbedding)
    }

    fn embed_images_graph(&self, g: &mut Graph, images: NodeId) -> Result<NodeId> {
        self.encoder.embed_graph(g, images)
    }
}
