//! Training objectives, built as nodes in a caller-owned [`Graph`] so the
//! generator forward pass and the loss share one tape.
//!
//! Every loss averages per-sample terms over the batch. Entry points taking
//! a backend slice additionally average over backends with equal weights.

use crate::embedding::{DirectionVector, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Floor for the image-direction norm in the directional loss denominator.
/// While the trainable generator still matches the frozen one the direction
/// is exactly zero; the floor makes that case evaluate to loss 1 instead of
/// dividing by zero.
pub const IMAGE_DIRECTION_FLOOR: f64 = 1e-6;

/// Image-space distance used by [`outside_mask_consistency`]. Deployments
/// wrap a pretrained perceptual network; tests use [`PixelL2`].
pub trait PerceptualDistance {
    fn name(&self) -> &str;

    /// Mean distance between aligned `[B, 3, H, W]` batches, as a scalar
    /// node in `g`.
    fn batch_distance(&self, g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId>;
}

/// Mean squared pixel difference. Identical to the plain L2 term of the
/// consistency loss, so under this plugin the combined loss is exactly twice
/// the L2 term.
pub struct PixelL2;

impl PerceptualDistance for PixelL2 {
    fn name(&self) -> &str {
        "pixel-l2"
    }

    fn batch_distance(&self, g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = g.sub(a, b);
        let sq = g.mul(d, d);
        Ok(g.mean_all(sq))
    }
}

/// Mean cosine distance between image embeddings and the embedded target
/// text: `mean_b 1 - cos(E_I(img_b), E_T(target))`, averaged over backends.
pub fn global_clip_loss(
    g: &mut Graph,
    images: NodeId,
    target_text: &str,
    backends: &[Box<dyn EmbeddingBackend>],
) -> Result<NodeId> {
    require_backends(backends)?;
    image_batch_size(g, images)?;
    let mut per_backend = Vec::with_capacity(backends.len());
    for backend in backends {
        let target = backend.embed_text(target_text)?;
        let embeddings = backend.embed_images_graph(g, images)?;
        // Both sides are unit vectors, so the dot product is the cosine.
        let t = g.constant(target);
        let prod = g.mul(embeddings, t);
        let dots = g.sum_keep_last(prod);
        per_backend.push(one_minus_mean(g, dots));
    }
    Ok(mean_of(g, &per_backend))
}

/// Cosine distance between the per-sample image-space direction
/// `E_I(train_b) - E_I(frozen_b)` and a fixed embedding direction, averaged
/// over the batch and over backends. `directions[i]` must live in
/// `backends[i]`'s embedding space.
pub fn directional_clip_loss(
    g: &mut Graph,
    train_images: NodeId,
    frozen_images: NodeId,
    directions: &[DirectionVector],
    backends: &[Box<dyn EmbeddingBackend>],
) -> Result<NodeId> {
    require_backends(backends)?;
    if directions.len() != backends.len() {
        return Err(Error::InvalidConfig(format!(
            "{} directions for {} backends",
            directions.len(),
            backends.len()
        )));
    }
    aligned_batches(g, train_images, frozen_images)?;
    let mut per_backend = Vec::with_capacity(backends.len());
    for (backend, direction) in backends.iter().zip(directions) {
        direction.values().expect_shape(&[backend.dimension()])?;
        let train = backend.embed_images_graph(g, train_images)?;
        let frozen = backend.embed_images_graph(g, frozen_images)?;
        per_backend.push(directional_term(g, train, frozen, direction));
    }
    Ok(mean_of(g, &per_backend))
}

/// Direction from a frozen-generator sample set towards a small set of
/// reference images: `mean(E_I(real)) - mean(E_I(samples))`.
pub fn fewshot_image_direction(
    real_images: &[Tensor],
    source_samples: &[Tensor],
    backend: &dyn EmbeddingBackend,
) -> Result<DirectionVector> {
    if real_images.is_empty() || source_samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let real = mean_embedding(real_images, backend)?;
    let source = mean_embedding(source_samples, backend)?;
    DirectionVector::new(real.sub(&source), "generator samples", "reference images")
}

/// [`fewshot_image_direction`] for each backend in turn.
pub fn fewshot_image_directions(
    real_images: &[Tensor],
    source_samples: &[Tensor],
    backends: &[Box<dyn EmbeddingBackend>],
) -> Result<Vec<DirectionVector>> {
    require_backends(backends)?;
    backends
        .iter()
        .map(|b| fewshot_image_direction(real_images, source_samples, b.as_ref()))
        .collect()
}

/// Mean squared embedding-space distance between two aligned image batches.
/// Latent-mapper training applies this to generator outputs before and
/// after manipulation to keep the edit in the embedding neighborhood of the
/// original.
pub fn embedding_norm_loss(
    g: &mut Graph,
    base_images: NodeId,
    shifted_images: NodeId,
    backend: &dyn EmbeddingBackend,
) -> Result<NodeId> {
    aligned_batches(g, base_images, shifted_images)?;
    let base = backend.embed_images_graph(g, base_images)?;
    let shifted = backend.embed_images_graph(g, shifted_images)?;
    let d = g.sub(base, shifted);
    let sq = g.mul(d, d);
    let per_sample = g.sum_keep_last(sq);
    Ok(g.mean_all(per_sample))
}

/// [`directional_clip_loss`] with all pixels outside each sample's mask
/// zeroed in both image batches first. Masks are `[B, 1, H, W]` with values
/// 0 or 1; a sample whose mask selects nothing is an error.
pub fn masked_directional_loss(
    g: &mut Graph,
    train_images: NodeId,
    frozen_images: NodeId,
    masks: &Tensor,
    directions: &[DirectionVector],
    backends: &[Box<dyn EmbeddingBackend>],
) -> Result<NodeId> {
    aligned_batches(g, train_images, frozen_images)?;
    let keep = mask_node(g, train_images, masks, MaskSide::Inside)?;
    let train = g.mul(train_images, keep);
    let frozen = g.mul(frozen_images, keep);
    directional_clip_loss(g, train, frozen, directions, backends)
}

/// Pixel L2 plus a pluggable perceptual distance over the complement of the
/// mask, with the masked region zeroed in both batches. Keeps content the
/// adaptation is not supposed to touch anchored to the frozen generator. An
/// all-true mask leaves nothing outside and evaluates to 0.
pub fn outside_mask_consistency(
    g: &mut Graph,
    train_images: NodeId,
    frozen_images: NodeId,
    masks: &Tensor,
    perceptual: &dyn PerceptualDistance,
) -> Result<NodeId> {
    aligned_batches(g, train_images, frozen_images)?;
    let outside = mask_node(g, train_images, masks, MaskSide::Outside)?;
    let a = g.mul(train_images, outside);
    let b = g.mul(frozen_images, outside);
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    let l2 = g.mean_all(sq);
    let perceptual_term = perceptual.batch_distance(g, a, b)?;
    Ok(g.add(l2, perceptual_term))
}

fn require_backends(backends: &[Box<dyn EmbeddingBackend>]) -> Result<()> {
    if backends.is_empty() {
        return Err(Error::InvalidConfig("no embedding backends".into()));
    }
    Ok(())
}

fn image_batch_size(g: &Graph, images: NodeId) -> Result<usize> {
    let s = g.value(images).shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("[B, 3, H, W]", s));
    }
    if s[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(s[0])
}

fn aligned_batches(g: &Graph, a: NodeId, b: NodeId) -> Result<usize> {
    let na = image_batch_size(g, a)?;
    let nb = image_batch_size(g, b)?;
    if na != nb {
        return Err(Error::BatchMismatch { a: na, b: nb });
    }
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::shape(format!("{sa:?}"), sb));
    }
    Ok(na)
}

/// Per-sample cosine against `direction` with the norm floor, folded to
/// `1 - mean cos`.
fn directional_term(
    g: &mut Graph,
    train_embeddings: NodeId,
    frozen_embeddings: NodeId,
    direction: &DirectionVector,
) -> NodeId {
    let delta = g.sub(train_embeddings, frozen_embeddings);
    let d = g.constant(direction.values().clone());
    let prod = g.mul(delta, d);
    let dots = g.sum_keep_last(prod);
    let sq = g.mul(delta, delta);
    let norm_sq = g.sum_keep_last(sq);
    let norms = g.sqrt(norm_sq);
    let floored = g.clamp_min(norms, IMAGE_DIRECTION_FLOOR);
    let denom = g.mul_scalar(floored, direction.norm());
    let cos = g.div(dots, denom);
    one_minus_mean(g, cos)
}

fn one_minus_mean(g: &mut Graph, per_sample: NodeId) -> NodeId {
    let mean = g.mean_all(per_sample);
    let neg = g.mul_scalar(mean, -1.0);
    g.add_scalar(neg, 1.0)
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> NodeId {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.mul_scalar(acc, 1.0 / terms.len() as f64)
}

fn mean_embedding(images: &[Tensor], backend: &dyn EmbeddingBackend) -> Result<Tensor> {
    let mut acc = Tensor::zeros(vec![backend.dimension()]);
    for image in images {
        acc.add_assign(&backend.embed_image(image)?);
    }
    Ok(acc.scale(1.0 / images.len() as f64))
}

enum MaskSide {
    Inside,
    Outside,
}

/// Validates a `[B, 1, H, W]` binary mask against the image batch and turns
/// the requested side into a constant multiplier node. Only the inside view
/// requires nonempty per-sample coverage.
fn mask_node(g: &mut Graph, images: NodeId, masks: &Tensor, side: MaskSide) -> Result<NodeId> {
    let s = g.value(images).shape();
    masks.expect_shape(&[s[0], 1, s[2], s[3]])?;
    if masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidConfig(
            "mask values must be exactly 0 or 1".into(),
        ));
    }
    match side {
        MaskSide::Inside => {
            let per_sample = s[2] * s[3];
            for b in 0..s[0] {
                let sample = &masks.data()[b * per_sample..(b + 1) * per_sample];
                if sample.iter().all(|&v| v == 0.0) {
                    return Err(Error::EmptyMask);
                }
            }
            Ok(g.constant(masks.clone()))
        }
        MaskSide::Outside => {
            let inverted = Tensor::new(
                masks.shape().to_vec(),
                masks.data().iter().map(|&v| 1.0 - v).collect(),
            );
            Ok(g.constant(inverted))
        }
    }
}
