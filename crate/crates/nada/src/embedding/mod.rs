//! Joint text/image embedding backends and direction construction.
//!
//! Images are channel-first `[3, H, W]` (batches `[B, 3, H, W]`) with values
//! in `[0, 1]`. Every embedding returned by a backend is unit-norm, and the
//! image path is differentiable through [`Graph`] so generator pixels receive
//! gradients.

mod external;
mod mock;

pub use external::ExternalBackend;
pub use mock::MockBackend;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Norm below which a direction vector is rejected as a loss target.
pub const DIRECTION_EPS: f64 = 1e-8;

/// Per-channel normalization applied after resizing to the encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessing {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessing {
    /// Maps `[0,1]` pixels to `[-1,1]`.
    pub fn centered() -> Self {
        Preprocessing {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }

    /// Leaves pixels untouched.
    pub fn identity() -> Self {
        Preprocessing {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

pub trait EmbeddingBackend {
    fn name(&self) -> &str;
    /// Embedding size.
    fn dimension(&self) -> usize;
    /// Encoder input side length in pixels.
    fn input_resolution(&self) -> usize;
    fn preprocessing(&self) -> &Preprocessing;

    /// Embed a prompt to a unit vector of [`Self::dimension`].
    fn embed_text(&self, prompt: &str) -> Result<Tensor>;

    /// Embed one `[3, H, W]` image to a unit vector. Backends with a
    /// registered fallback return it instead of failing on an image whose
    /// projection is exactly zero.
    fn embed_image(&self, image: &Tensor) -> Result<Tensor>;

    /// Embed a `[B, 3, H, W]` batch inside an existing graph, producing a
    /// `[B, dimension]` node with unit-norm rows. Errors if any projection in
    /// the batch is degenerate: inside a loss there is no meaningful
    /// fallback.
    fn embed_images_graph(&self, g: &mut Graph, images: NodeId) -> Result<NodeId>;
}

/// CLIP-space direction between two named anchors (text prompts or image
/// sets). Not necessarily unit-norm; cosine losses normalize it.
#[derive(Clone, Debug)]
pub struct DirectionVector {
    values: Tensor,
    source_label: String,
    target_label: String,
}

impl DirectionVector {
    /// Rejects near-zero vectors: they cannot steer a cosine loss.
    pub fn new(
        values: Tensor,
        source_label: impl Into<String>,
        target_label: impl Into<String>,
    ) -> Result<Self> {
        if values.l2_norm() < DIRECTION_EPS {
            return Err(Error::DegenerateDirection);
        }
        Ok(DirectionVector {
            values,
            source_label: source_label.into(),
            target_label: target_label.into(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn source_label(&self) -> &str {
        &self.source_label
    }

    pub fn target_label(&self) -> &str {
        &self.target_label
    }

    pub fn norm(&self) -> f64 {
        self.values.l2_norm()
    }
}

/// `embed_text(target) - embed_text(source)`, labeled by the prompts.
pub fn text_direction(
    source_text: &str,
    target_text: &str,
    backend: &dyn EmbeddingBackend,
) -> Result<DirectionVector> {
    if source_text == target_text {
        return Err(Error::IdenticalPrompts);
    }
    let s = backend.embed_text(source_text)?;
    let t = backend.embed_text(target_text)?;
    DirectionVector::new(t.sub(&s), source_text, target_text)
}

/// One direction per backend, in backend order.
pub fn text_directions(
    source_text: &str,
    target_text: &str,
    backends: &[Box<dyn EmbeddingBackend>],
) -> Result<Vec<DirectionVector>> {
    backends
        .iter()
        .map(|b| text_direction(source_text, target_text, b.as_ref()))
        .collect()
}

/// Instantiate a backend from its identifier.
///
/// Two colon-delimited mock forms exist alongside external checkpoint names:
/// `mock:<seed>:<dim>:<res>[:<prompts.tsv>]` for a seeded random projection
/// and `mean-rgb:<res>[:<prompts.tsv>]` for the mean-color embedding. Any
/// other identifier loads an exported encoder archive from the cache
/// directory.
pub fn resolve_backend(identifier: &str) -> Result<Box<dyn EmbeddingBackend>> {
    fn field<T: std::str::FromStr>(id: &str, part: Option<&str>, what: &str) -> Result<T> {
        part.and_then(|s| s.parse().ok()).ok_or_else(|| {
            Error::InvalidConfig(format!("backend id {id:?}: missing or invalid {what}"))
        })
    }

    if let Some(rest) = identifier.strip_prefix("mock:") {
        let mut parts = rest.splitn(4, ':');
        let seed: u64 = field(identifier, parts.next(), "seed")?;
        let dim: usize = field(identifier, parts.next(), "dimension")?;
        let res: usize = field(identifier, parts.next(), "resolution")?;
        if dim == 0 || res == 0 {
            return Err(Error::InvalidConfig(format!(
                "backend id {identifier:?}: dimension and resolution must be nonzero"
            )));
        }
        let mut backend = MockBackend::new(seed, dim, res);
        if let Some(table) = parts.next() {
            backend.load_text_table(std::path::Path::new(table))?;
        }
        return Ok(Box::new(backend));
    }
    if let Some(rest) = identifier.strip_prefix("mean-rgb:") {
        let mut parts = rest.splitn(2, ':');
        let res: usize = field(identifier, parts.next(), "resolution")?;
        if res == 0 {
            return Err(Error::InvalidConfig(format!(
                "backend id {identifier:?}: resolution must be nonzero"
            )));
        }
        let mut backend = MockBackend::mean_rgb(res);
        if let Some(table) = parts.next() {
            backend.load_text_table(std::path::Path::new(table))?;
        }
        return Ok(Box::new(backend));
    }
    Ok(Box::new(ExternalBackend::load(identifier)?))
}

/// All identifiers resolved, in order. An empty list is a config error: a
/// run with no backends has no objective.
pub fn resolve_backends(identifiers: &[String]) -> Result<Vec<Box<dyn EmbeddingBackend>>> {
    if identifiers.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one embedding backend".into(),
        ));
    }
    identifiers.iter().map(|id| resolve_backend(id)).collect()
}

/// Resize a `[B, 3, H, W]` node to the encoder resolution and apply
/// per-channel normalization. Differentiable end to end.
pub fn preprocess_graph(
    g: &mut Graph,
    images: NodeId,
    resolution: usize,
    pre: &Preprocessing,
) -> NodeId {
    let s = g.shape(images);
    assert_eq!(s.len(), 4, "preprocess expects [B,3,H,W], got {s:?}");
    assert_eq!(s[1], 3, "preprocess expects 3 channels, got {s:?}");
    let resized = g.resize_bilinear(images, resolution, resolution);
    let mean = g.constant(Tensor::new(vec![3, 1, 1], pre.mean.to_vec()));
    let std = g.constant(Tensor::new(vec![3, 1, 1], pre.std.to_vec()));
    let centered = g.sub(resized, mean);
    g.div(centered, std)
}

pub(crate) fn validate_image_batch(t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("[B,3,H,W]", s));
    }
    if !t.is_finite() {
        return Err(Error::NonFinitePixels);
    }
    Ok(())
}

pub(crate) fn validate_single_image(t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("[3,H,W]", s));
    }
    if !t.is_finite() {
        return Err(Error::NonFinitePixels);
    }
    Ok(())
}

/// Shared image path for backends whose encoder is a linear map over the
/// preprocessed image: resize, normalize, flatten, project, unit-normalize
/// rows.
pub(crate) struct LinearImageEncoder {
    resolution: usize,
    pre: Preprocessing,
    /// `[3*R*R, dim]`, the projection stored ready for right-multiplication.
    proj_t: Tensor,
    dim: usize,
}

impl LinearImageEncoder {
    /// `projection` is `[dim, 3*R*R]`.
    pub fn new(projection: &Tensor, resolution: usize, pre: Preprocessing) -> Result<Self> {
        let s = projection.shape();
        if s.len() != 2 || s[1] != 3 * resolution * resolution {
            return Err(Error::shape(
                format!("[dim, {}]", 3 * resolution * resolution),
                s,
            ));
        }
        let dim = s[0];
        let mut g = Graph::new();
        let p = g.constant(projection.clone());
        let pt = g.transpose2(p);
        Ok(LinearImageEncoder {
            resolution,
            pre,
            proj_t: g.value(pt).clone(),
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw (pre-normalization) projections of a batch: `[B, dim]`.
    fn project(&self, g: &mut Graph, images: NodeId) -> NodeId {
        let s = g.shape(images);
        let b = s[0];
        let pre = preprocess_graph(g, images, self.resolution, &self.pre);
        let flat = g.reshape(pre, vec![b, 3 * self.resolution * self.resolution]);
        let pt = g.constant(self.proj_t.clone());
        g.matmul(flat, pt)
    }

    /// Graph path: errors on degenerate projections.
    pub fn embed_graph(&self, g: &mut Graph, images: NodeId) -> Result<NodeId> {
        validate_image_batch(g.value(images))?;
        let raw = self.project(g, images);
        let sq = g.mul(raw, raw);
        let ss = g.sum_keep_last(sq);
        let norm = g.sqrt(ss);
        if g.value(norm).data().iter().any(|&n| n < DIRECTION_EPS) {
            return Err(Error::DegenerateEmbedding);
        }
        let clamped = g.clamp_min(norm, 1e-300);
        Ok(g.div(raw, clamped))
    }

    /// Value path for one `[3, H, W]` image; `None` when the projection is
    /// degenerate so the caller can substitute a fallback.
    pub fn embed_value(&self, image: &Tensor) -> Result<Option<Tensor>> {
        validate_single_image(image)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let batch = image.clone().reshaped(vec![1, 3, h, w]);
        let mut g = Graph::new();
        let node = g.constant(batch);
        let raw = self.project(&mut g, node);
        let mut values = g.value(raw).data().to_vec();
        let norm = crate::tensor::normalize_in_place(&mut values);
        if norm < DIRECTION_EPS {
            return Ok(None);
        }
        Ok(Some(Tensor::new(vec![self.dim], values)))
    }
}
