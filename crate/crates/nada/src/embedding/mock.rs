//! Deterministic stand-in for an external vision-language encoder.
//!
//! Image embeddings come from a fixed random linear projection of the
//! preprocessed image, so they are differentiable and reproducible from the
//! seed alone. Text embeddings are looked up in a table registered at
//! construction (or loaded from a file); unknown prompts are an error rather
//! than a silent default.

use std::collections::HashMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{normalize_in_place, Tensor};

use super::{
    EmbeddingBackend, LinearImageEncoder, Preprocessing, DIRECTION_EPS,
};

pub struct MockBackend {
    name: String,
    resolution: usize,
    pre: Preprocessing,
    encoder: LinearImageEncoder,
    text_table: HashMap<String, Tensor>,
    fallback: Tensor,
    dim: usize,
}

impl MockBackend {
    /// Random projection drawn from `seed`; entries scaled by
    /// `1/sqrt(3*R*R)` so embeddings stay O(1) before normalization.
    pub fn new(seed: u64, dimension: usize, input_resolution: usize) -> Self {
        assert!(dimension >= 1 && input_resolution >= 1);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let in_dim = 3 * input_resolution * input_resolution;
        let scale = 1.0 / (in_dim as f64).sqrt();
        let data: Vec<f64> = (0..dimension * in_dim)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                n * scale
            })
            .collect();
        let projection = Tensor::new(vec![dimension, in_dim], data);
        Self::with_projection(
            format!("mock-{seed}"),
            &projection,
            input_resolution,
            Preprocessing::centered(),
        )
        .expect("generated projection has the declared shape")
    }

    /// Backend whose image embedding is the unit-normalized mean color: a
    /// `[3, 3*R*R]` projection averaging each channel, with identity
    /// preprocessing. Useful wherever embedding semantics must be readable
    /// off the image. Text anchors are whatever the caller registers.
    pub fn mean_rgb(input_resolution: usize) -> Self {
        assert!(input_resolution >= 1);
        let px = input_resolution * input_resolution;
        let mut projection = Tensor::zeros(vec![3, 3 * px]);
        for c in 0..3 {
            for p in 0..px {
                projection.data_mut()[c * 3 * px + c * px + p] = 1.0 / px as f64;
            }
        }
        Self::with_projection(
            "mean-rgb",
            &projection,
            input_resolution,
            Preprocessing::identity(),
        )
        .expect("mean projection has the declared shape")
    }

    /// Full control over the projection and preprocessing, for tests that
    /// need an embedding with known semantics (e.g. mean color per channel).
    pub fn with_projection(
        name: impl Into<String>,
        projection: &Tensor,
        input_resolution: usize,
        pre: Preprocessing,
    ) -> Result<Self> {
        let encoder = LinearImageEncoder::new(projection, input_resolution, pre.clone())?;
        let dim = encoder.dim();
        let mut fallback = vec![0.0; dim];
        fallback[0] = 1.0;
        Ok(MockBackend {
            name: name.into(),
            resolution: input_resolution,
            pre,
            encoder,
            text_table: HashMap::new(),
            fallback: Tensor::new(vec![dim], fallback),
            dim,
        })
    }

    /// Register a prompt; the stored embedding is the unit-normalized input.
    pub fn register_text(&mut self, prompt: &str, values: &[f64]) -> Result<&mut Self> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if values.len() != self.dim {
            return Err(Error::shape(format!("[{}]", self.dim), &[values.len()][..]));
        }
        let mut v = values.to_vec();
        let norm = normalize_in_place(&mut v);
        if norm < DIRECTION_EPS {
            return Err(Error::DegenerateEmbedding);
        }
        self.text_table
            .insert(prompt.to_string(), Tensor::new(vec![self.dim], v));
        Ok(self)
    }

    /// Load `prompt<TAB>v1,v2,...` lines. Returns the number of entries
    /// registered. Blank lines are skipped; anything else malformed is an
    /// error naming the line.
    pub fn load_text_table(&mut self, path: &Path) -> Result<usize> {
        let text = std::fs::read_to_string(path)?;
        let mut count = 0;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (prompt, rest) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{}:{}: expected prompt<TAB>v1,v2,...",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let values: Vec<f64> = rest
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| {
                    Error::InvalidConfig(format!(
                        "{}:{}: bad float: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
            self.register_text(prompt, &values).map_err(|e| {
                Error::InvalidConfig(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            count += 1;
        }
        Ok(count)
    }

    /// Replace the unit vector returned for zero-projection images.
    pub fn set_fallback(&mut self, values: &[f64]) -> Result<()> {
        let mut v = values.to_vec();
        if normalize_in_place(&mut v) < DIRECTION_EPS || v.len() != self.dim {
            return Err(Error::DegenerateEmbedding);
        }
        self.fallback = Tensor::new(vec![self.dim], v);
        Ok(())
    }
}

impl EmbeddingBackend for MockBackend {
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
        self.text_table
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))
    }

    fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self
            .encoder
            .embed_value(image)?
            .unwrap_or_else(|| self.fallback.clone()))
    }

    fn embed_images_graph(&self, g: &mut Graph, images: NodeId) -> Result<NodeId> {
        self.encoder.embed_graph(g, images)
    }
}
