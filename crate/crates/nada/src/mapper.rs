//! Residual latent mapper over W+ codes.
//!
//! Three per-group MLPs (coarse/medium/fine row ranges) each produce a
//! residual for their rows; the mapped code is `wplus + residual`. Final
//! layers start at zero, so a fresh mapper is exactly the identity. Training
//! moves codes toward a target region of an adapted generator whose weights
//! never change.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::embedding::{resolve_backends, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::generator::{broadcast_w_batch, ForwardMode, Linear, StyleGenerator};
use crate::graph::{Graph, NodeId};
use crate::losses::{embedding_norm_loss, global_clip_loss};
use crate::tensor::Tensor;
use crate::trainer::AdamState;

pub const DEFAULT_LAMBDA_L2: f64 = 0.5;
pub const DEFAULT_LAMBDA_NORM: f64 = 0.2;
/// Row ranges `[0, 4)`, `[4, 8)`, `[8, L)` unless reconfigured.
pub const DEFAULT_BOUNDARIES: (usize, usize) = (4, 8);

const MLP_LAYERS: usize = 4;
const LRELU_SLOPE: f64 = 0.2;
const GROUP_NAMES: [&str; 3] = ["coarse", "medium", "fine"];

fn default_batch_size() -> usize {
    2
}

fn default_learning_rate() -> f64 {
    0.002
}

fn default_lambda_l2() -> f64 {
    DEFAULT_LAMBDA_L2
}

fn default_lambda_norm() -> f64 {
    DEFAULT_LAMBDA_NORM
}

fn default_boundaries() -> (usize, usize) {
    DEFAULT_BOUNDARIES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperConfig {
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Weight on the mean squared residual.
    #[serde(default = "default_lambda_l2")]
    pub lambda_l2: f64,
    /// Weight on the embedding-shift penalty.
    #[serde(default = "default_lambda_norm")]
    pub lambda_norm: f64,
    /// Group boundaries `(b0, b1)`; rows split at `[0,b0)`, `[b0,b1)`,
    /// `[b1,L)`, clamped to the layer count.
    #[serde(default = "default_boundaries")]
    pub boundaries: (usize, usize),
    pub backends: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl MapperConfig {
    pub fn new(iterations: usize, backends: Vec<String>) -> Self {
        MapperConfig {
            iterations,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            lambda_l2: DEFAULT_LAMBDA_L2,
            lambda_norm: DEFAULT_LAMBDA_NORM,
            boundaries: DEFAULT_BOUNDARIES,
            backends,
            seed: 0,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "iterations and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be finite and positive",
                self.learning_rate
            )));
        }
        if !(self.lambda_l2.is_finite() && self.lambda_l2 >= 0.0)
            || !(self.lambda_norm.is_finite() && self.lambda_norm >= 0.0)
        {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if self.boundaries.0 > self.boundaries.1 {
            return Err(Error::InvalidConfig(format!(
                "boundaries ({}, {}) must be nondecreasing",
                self.boundaries.0, self.boundaries.1
            )));
        }
        if self.backends.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one embedding backend".into(),
            ));
        }
        Ok(())
    }
}

struct GroupMlp {
    layers: Vec<Linear>,
}

impl GroupMlp {
    /// Hidden layers random, final layer zeroed: the group starts as a zero
    /// residual.
    fn init(rng: &mut ChaCha20Rng, w_dim: usize) -> Self {
        let mut layers = Vec::with_capacity(MLP_LAYERS);
        for _ in 0..MLP_LAYERS - 1 {
            layers.push(Linear::init(rng, w_dim, w_dim, 0.0));
        }
        layers.push(Linear::zeroed(w_dim, w_dim));
        GroupMlp { layers }
    }

    fn zeroed(w_dim: usize) -> Self {
        GroupMlp {
            layers: (0..MLP_LAYERS).map(|_| Linear::zeroed(w_dim, w_dim)).collect(),
        }
    }
}

pub struct LatentMapper {
    groups: Vec<GroupMlp>,
    /// Row split points `[0, b0, b1, L]` after clamping.
    bounds: [usize; 4],
    num_layers: usize,
    w_dim: usize,
}

impl LatentMapper {
    pub fn new(
        num_layers: usize,
        w_dim: usize,
        boundaries: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        if num_layers == 0 || w_dim == 0 {
            return Err(Error::InvalidConfig(
                "mapper needs at least one layer and a nonzero w_dim".into(),
            ));
        }
        if boundaries.0 > boundaries.1 {
            return Err(Error::InvalidConfig(format!(
                "boundaries ({}, {}) must be nondecreasing",
                boundaries.0, boundaries.1
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let groups = (0..3).map(|_| GroupMlp::init(&mut rng, w_dim)).collect();
        Ok(LatentMapper {
            groups,
            bounds: [
                0,
                boundaries.0.min(num_layers),
                boundaries.1.min(num_layers),
                num_layers,
            ],
            num_layers,
            w_dim,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn w_dim(&self) -> usize {
        self.w_dim
    }

    /// Clamped split points as `(b0, b1)`.
    pub fn boundaries(&self) -> (usize, usize) {
        (self.bounds[1], self.bounds[2])
    }

    /// Rows `[start, end)` owned by group `i`.
    pub fn group_rows(&self, i: usize) -> (usize, usize) {
        (self.bounds[i], self.bounds[i + 1])
    }

    /// Mapped codes from a `[B, L, w_dim]` node, plus the parameter nodes
    /// when `trainable`. Every row runs through its group's MLP
    /// independently; masking keeps each group's gradient on its own rows.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        wplus: NodeId,
        trainable: bool,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let shape = g.shape(wplus).to_vec();
        if shape.len() != 3 || shape[1] != self.num_layers || shape[2] != self.w_dim {
            return Err(Error::shape(
                format!("[B, {}, {}]", self.num_layers, self.w_dim),
                &shape,
            ));
        }
        let b = shape[0];
        let rows = b * self.num_layers;
        let flat = g.reshape(wplus, vec![rows, self.w_dim]);
        let mut params = Vec::new();
        let mut residual: Option<NodeId> = None;
        for (gi, group) in self.groups.iter().enumerate() {
            let (start, end) = self.group_rows(gi);
            if start == end {
                continue;
            }
            let mut h = flat;
            for (li, fc) in group.layers.iter().enumerate() {
                if trainable {
                    let w = g.param(fc.weight.clone());
                    let bias = g.param(fc.bias.clone());
                    params.push((format!("{}.fc{li}.weight", GROUP_NAMES[gi]), w));
                    params.push((format!("{}.fc{li}.bias", GROUP_NAMES[gi]), bias));
                    h = Linear::graph_with(g, h, w, bias);
                } else {
                    h = fc.graph_const(g, h);
                }
                if li + 1 < group.layers.len() {
                    h = g.leaky_relu(h, LRELU_SLOPE);
                }
            }
            let mut mask = Tensor::zeros(vec![rows, self.w_dim]);
            for sample in 0..b {
                for row in start..end {
                    let offset = (sample * self.num_layers + row) * self.w_dim;
                    mask.data_mut()[offset..offset + self.w_dim].fill(1.0);
                }
            }
            let mask = g.constant(mask);
            let masked = g.mul(h, mask);
            residual = Some(match residual {
                Some(acc) => g.add(acc, masked),
                None => masked,
            });
        }
        let out_flat = match residual {
            Some(r) => g.add(flat, r),
            None => flat,
        };
        let out = g.reshape(out_flat, shape);
        Ok((out, params))
    }

    /// Value-space application for `[L, w_dim]` or `[B, L, w_dim]` codes.
    /// Stateless: the result depends only on weights and input.
    pub fn apply(&self, wplus: &Tensor) -> Result<Tensor> {
        let shape = wplus.shape().to_vec();
        let batched = match shape.len() {
            2 => wplus
                .clone()
                .reshaped(vec![1, shape[0], shape[1]]),
            3 => wplus.clone(),
            _ => return Err(Error::shape("[L, w_dim] or [B, L, w_dim]", &shape)),
        };
        let mut g = Graph::new();
        let node = g.constant(batched);
        let (out, _) = self.forward_graph(&mut g, node, false)?;
        let mut result = g.value(out).clone();
        if shape.len() == 2 {
            result = result.reshaped(shape);
        }
        Ok(result)
    }

    /// All weights under their checkpoint names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (gi, group) in self.groups.iter().enumerate() {
            for (li, fc) in group.layers.iter().enumerate() {
                out.push((format!("{}.fc{li}.weight", GROUP_NAMES[gi]), fc.weight.clone()));
                out.push((format!("{}.fc{li}.bias", GROUP_NAMES[gi]), fc.bias.clone()));
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (group_name, rest) = name.split_once('.')?;
        let gi = GROUP_NAMES.iter().position(|n| *n == group_name)?;
        let (fc, field) = rest.split_once('.')?;
        let li: usize = fc.strip_prefix("fc")?.parse().ok()?;
        let layer = self.groups.get_mut(gi)?.layers.get_mut(li)?;
        match field {
            "weight" => Some(&mut layer.weight),
            "bias" => Some(&mut layer.bias),
            _ => None,
        }
    }

    /// Little-endian bytes of every weight, for equality checks.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }
}

pub fn save_mapper(mapper: &LatentMapper, path: &Path) -> Result<()> {
    let (b0, b1) = mapper.boundaries();
    let manifest = json!({
        "kind": "mapper",
        "num_layers": mapper.num_layers(),
        "w_dim": mapper.w_dim(),
        "boundaries": [b0, b1],
    });
    container::write_archive(path, &manifest, &mapper.named_tensors())
}

pub fn load_mapper(path: &Path) -> Result<LatentMapper> {
    let (manifest, tensors) = container::read_archive(path)?;
    let bad = |reason: String| Error::checkpoint(path, reason);
    if manifest["kind"].as_str() != Some("mapper") {
        return Err(bad(format!(
            "kind {:?} is not a mapper archive",
            manifest["kind"]
        )));
    }
    let num_layers = manifest["num_layers"]
        .as_u64()
        .ok_or_else(|| bad("missing num_layers".into()))? as usize;
    let w_dim = manifest["w_dim"]
        .as_u64()
        .ok_or_else(|| bad("missing w_dim".into()))? as usize;
    let bounds = manifest["boundaries"]
        .as_array()
        .and_then(|a| {
            let b0 = a.first()?.as_u64()?;
            let b1 = a.get(1)?.as_u64()?;
            Some((b0 as usize, b1 as usize))
        })
        .ok_or_else(|| bad("missing boundaries".into()))?;

    let mut mapper = LatentMapper {
        groups: (0..3).map(|_| GroupMlp::zeroed(w_dim)).collect(),
        bounds: [0, bounds.0.min(num_layers), bounds.1.min(num_layers), num_layers],
        num_layers,
        w_dim,
    };
    let expected: Vec<String> = mapper.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut seen = Vec::new();
    for (name, tensor) in tensors {
        let slot = mapper
            .tensor_mut(&name)
            .ok_or_else(|| bad(format!("unexpected array {name:?}")))?;
        tensor
            .expect_shape(slot.shape())
            .map_err(|e| bad(format!("array {name:?}: {e}")))?;
        *slot = tensor;
        seen.push(name);
    }
    for name in &expected {
        if !seen.contains(name) {
            return Err(bad(format!("missing array {name:?}")));
        }
    }
    Ok(mapper)
}

/// Train a fresh mapper against `generator` (left untouched) with backends
/// resolved from the config identifiers.
pub fn train_mapper(
    generator: &StyleGenerator,
    target_text: &str,
    config: &MapperConfig,
) -> Result<LatentMapper> {
    config.validate()?;
    let backends = resolve_backends(&config.backends)?;
    train_mapper_with_backends(generator, target_text, config, &backends)
}

/// Same loop with caller-supplied backend instances.
pub fn train_mapper_with_backends(
    generator: &StyleGenerator,
    target_text: &str,
    config: &MapperConfig,
    backends: &[Box<dyn EmbeddingBackend>],
) -> Result<LatentMapper> {
    config.validate()?;
    if target_text.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let layers = generator.num_layers();
    let w_dim = generator.architecture().w_dim;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut mapper = LatentMapper::new(layers, w_dim, config.boundaries, config.seed)?;
    let mut opt = AdamState::new(config.learning_rate);

    for iter in 0..config.iterations {
        let z = generator.sample_z(config.batch_size, &mut rng);
        let w = generator.map_to_w(&z, 1.0)?;
        let codes = broadcast_w_batch(&w, layers);

        let mut g = Graph::new();
        let code_node = g.constant(codes);
        let (mapped, params) = mapper.forward_graph(&mut g, code_node, true)?;
        let (base_img, _) = generator.forward_graph(&mut g, code_node, ForwardMode::Frozen)?;
        let (mapped_img, _) = generator.forward_graph(&mut g, mapped, ForwardMode::Frozen)?;

        let global = global_clip_loss(&mut g, mapped_img, target_text, backends)?;
        let residual = g.sub(mapped, code_node);
        let sq = g.mul(residual, residual);
        let sum_sq = g.sum_all(sq);
        let l2 = g.mul_scalar(sum_sq, 1.0 / config.batch_size as f64);
        let mut norm_sum: Option<NodeId> = None;
        for backend in backends {
            let term = embedding_norm_loss(&mut g, base_img, mapped_img, backend.as_ref())?;
            norm_sum = Some(match norm_sum {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        let norm = norm_sum.expect("validated config has backends");
        let norm = g.mul_scalar(norm, 1.0 / backends.len() as f64);

        let weighted_l2 = g.mul_scalar(l2, config.lambda_l2);
        let weighted_norm = g.mul_scalar(norm, config.lambda_norm);
        let partial = g.add(global, weighted_l2);
        let total = g.add(partial, weighted_norm);

        let loss_value = g.value(total).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                last_snapshot: None,
            });
        }
        let grads = g.backward(total);
        let mut updates = Vec::with_capacity(params.len());
        for (name, node) in &params {
            let grad = match grads.get(*node) {
                Some(t) => t.clone(),
                None => Tensor::zeros(g.shape(*node).to_vec()),
            };
            if !grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: iter,
                    last_snapshot: None,
                });
            }
            updates.push((name.clone(), grad));
        }
        for (name, grad) in updates {
            let value = mapper
                .tensor_mut(&name)
                .expect("forward parameters map to mapper names");
            opt.apply(&name, value, &grad);
        }
    }
    Ok(mapper)
}

/// Save a trained mapper next to its generator checkpoint; convenience for
/// the command-line flow.
pub fn train_and_save(
    generator: &StyleGenerator,
    target_text: &str,
    config: &MapperConfig,
    out_path: &Path,
) -> Result<LatentMapper> {
    let mapper = train_mapper(generator, target_text, config)?;
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)?;
    }
    save_mapper(&mapper, out_path)?;
    Ok(mapper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::MockBackend;
    use crate::generator::Architecture;
    use crate::tensor::normalize_in_place;

    fn tiny_gen(seed: u64) -> StyleGenerator {
        StyleGenerator::with_architecture(
            Architecture {
                z_dim: 8,
                w_dim: 8,
                base_resolution: 4,
                channels: vec![4, 4, 4, 4],
            },
            seed,
        )
        .unwrap()
    }

    fn mean_rgb_backends(gen: &StyleGenerator) -> Vec<Box<dyn EmbeddingBackend>> {
        let res = gen.resolution();
        let mut backend = MockBackend::mean_rgb(res);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let z = gen.sample_z(8, &mut rng);
        let w = gen.map_to_w(&z, 1.0).unwrap();
        let codes = broadcast_w_batch(&w, gen.num_layers());
        let imgs = gen.synthesize_batch(&codes).unwrap();
        let mut s = [0.0f64; 3];
        for b in 0..8 {
            let img = Tensor::new(
                vec![3, res, res],
                imgs.data()[b * 3 * res * res..(b + 1) * 3 * res * res].to_vec(),
            );
            let e = backend.embed_image(&img).unwrap();
            for c in 0..3 {
                s[c] += e.data()[c] / 8.0;
            }
        }
        normalize_in_place(&mut s);
        let mut t = [s[1], -s[0], 0.0];
        if t.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-9 {
            t = [0.0, s[2], -s[1]];
        }
        normalize_in_place(&mut t);
        backend.register_text("goal", &t).unwrap();
        vec![Box::new(backend)]
    }

    fn sample_codes(gen: &StyleGenerator, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let z = gen.sample_z(n, &mut rng);
        let w = gen.map_to_w(&z, 1.0).unwrap();
        broadcast_w_batch(&w, gen.num_layers())
    }

    fn mean_global_loss(
        gen: &StyleGenerator,
        codes: &Tensor,
        backends: &[Box<dyn EmbeddingBackend>],
    ) -> f64 {
        let imgs = gen.synthesize_batch(codes).unwrap();
        let mut g = Graph::new();
        let node = g.constant(imgs);
        let loss = global_clip_loss(&mut g, node, "goal", backends).unwrap();
        g.value(loss).item()
    }

    fn mean_residual_norm(mapper: &LatentMapper, codes: &Tensor) -> f64 {
        let mapped = mapper.apply(codes).unwrap();
        let diff = mapped.sub(codes);
        let b = codes.shape()[0];
        let per = diff.len() / b;
        (0..b)
            .map(|i| {
                diff.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / b as f64
    }

    #[test]
    fn fresh_mapper_is_exact_identity() {
        let mapper = LatentMapper::new(4, 8, DEFAULT_BOUNDARIES, 0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let gen = tiny_gen(1);
        let z = gen.sample_z(3, &mut rng);
        let w = gen.map_to_w(&z, 1.0).unwrap();
        let batch = broadcast_w_batch(&w, 4);
        let mapped = mapper.apply(&batch).unwrap();
        assert_eq!(mapped.to_le_bytes(), batch.to_le_bytes());

        let single = Tensor::new(vec![4, 8], batch.data()[..32].to_vec());
        let mapped_single = mapper.apply(&single).unwrap();
        assert_eq!(mapped_single.to_le_bytes(), single.to_le_bytes());
        assert_eq!(mapped_single.shape(), [4, 8]);
    }

    #[test]
    fn boundaries_clamp_to_the_layer_count() {
        let mapper = LatentMapper::new(4, 8, (4, 8), 0).unwrap();
        assert_eq!(mapper.boundaries(), (4, 4));
        assert_eq!(mapper.group_rows(0), (0, 4));
        assert_eq!(mapper.group_rows(1), (4, 4));
        assert_eq!(mapper.group_rows(2), (4, 4));
        assert!(LatentMapper::new(4, 8, (3, 2), 0).is_err());
        assert!(LatentMapper::new(0, 8, (4, 8), 0).is_err());
    }

    #[test]
    fn groups_affect_only_their_own_rows() {
        let gen = tiny_gen(5);
        let backends = mean_rgb_backends(&gen);
        // Boundaries (1, 2) split four rows into all three groups; a short
        // training run makes every final layer nonzero.
        let mut config = MapperConfig::new(5, vec!["unused".into()]);
        config.boundaries = (1, 2);
        config.learning_rate = 0.05;
        let mapper = train_mapper_with_backends(&gen, "goal", &config, &backends).unwrap();

        let base = sample_codes(&gen, 1, 9);
        let residual_of = |codes: &Tensor| mapper.apply(codes).unwrap().sub(codes);
        let r_base = residual_of(&base);
        assert!(r_base.l2_norm() > 0.0, "trained mapper must move codes");

        // Perturbing the coarse row leaves every other row's residual
        // bit-identical; same for the medium row.
        for perturbed_row in [0usize, 1] {
            let mut shifted = base.clone();
            for v in &mut shifted.data_mut()[perturbed_row * 8..(perturbed_row + 1) * 8] {
                *v += 0.5;
            }
            let r_shifted = residual_of(&shifted);
            for row in 0..4 {
                if row == perturbed_row {
                    continue;
                }
                let a = &r_base.data()[row * 8..(row + 1) * 8];
                let b = &r_shifted.data()[row * 8..(row + 1) * 8];
                assert_eq!(a, b, "row {row} residual moved when row {perturbed_row} changed");
            }
        }
    }

    #[test]
    fn apply_is_stateless() {
        let gen = tiny_gen(6);
        let backends = mean_rgb_backends(&gen);
        let mut config = MapperConfig::new(3, vec!["unused".into()]);
        config.learning_rate = 0.05;
        let mapper = train_mapper_with_backends(&gen, "goal", &config, &backends).unwrap();
        let codes = sample_codes(&gen, 2, 4);
        let once = mapper.apply(&codes).unwrap();
        let again = mapper.apply(&codes).unwrap();
        assert_eq!(once.to_le_bytes(), again.to_le_bytes());
        // Composition runs the same pure function on the mapped output.
        let twice = mapper.apply(&once).unwrap();
        let expected = once.add(&mapper.apply(&once).unwrap().sub(&once));
        assert_eq!(twice.to_le_bytes(), expected.to_le_bytes());
    }

    #[test]
    fn training_reduces_held_out_global_loss_without_touching_the_generator() {
        let gen = tiny_gen(7);
        let backends = mean_rgb_backends(&gen);
        let before = gen.state_bytes();
        let mut config = MapperConfig::new(200, vec!["unused".into()]);
        config.learning_rate = 0.01;
        config.seed = 11;
        let mapper = train_mapper_with_backends(&gen, "goal", &config, &backends).unwrap();
        assert_eq!(gen.state_bytes(), before);

        let held_out = sample_codes(&gen, 16, 1234);
        let identity_loss = mean_global_loss(&gen, &held_out, &backends);
        let mapped = mapper.apply(&held_out).unwrap();
        let mapped_loss = mean_global_loss(&gen, &mapped, &backends);
        assert!(
            mapped_loss < identity_loss,
            "mapped {mapped_loss} should beat identity {identity_loss}"
        );
    }

    #[test]
    fn heavy_residual_weight_shrinks_residuals() {
        let gen = tiny_gen(8);
        let backends = mean_rgb_backends(&gen);
        let held_out = sample_codes(&gen, 8, 555);

        let mut loose = MapperConfig::new(120, vec!["unused".into()]);
        loose.learning_rate = 0.01;
        let loose_mapper = train_mapper_with_backends(&gen, "goal", &loose, &backends).unwrap();

        let mut tight = loose.clone();
        tight.lambda_l2 = 1e6;
        let tight_mapper = train_mapper_with_backends(&gen, "goal", &tight, &backends).unwrap();

        let loose_norm = mean_residual_norm(&loose_mapper, &held_out);
        let tight_norm = mean_residual_norm(&tight_mapper, &held_out);
        assert!(
            tight_norm < loose_norm,
            "residuals {tight_norm} should shrink under the heavy weight vs {loose_norm}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let gen = tiny_gen(9);
        let mut config = MapperConfig::new(10, vec!["unused".into()]);
        config.seed = 21;
        let a = train_mapper_with_backends(&gen, "goal", &config, &mean_rgb_backends(&gen)).unwrap();
        let b = train_mapper_with_backends(&gen, "goal", &config, &mean_rgb_backends(&gen)).unwrap();
        assert_eq!(a.state_bytes(), b.state_bytes());
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_other_kinds() {
        let gen = tiny_gen(10);
        let backends = mean_rgb_backends(&gen);
        let config = MapperConfig::new(4, vec!["unused".into()]);
        let mapper = train_mapper_with_backends(&gen, "goal", &config, &backends).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mapper.ckpt");
        save_mapper(&mapper, &path).unwrap();
        let loaded = load_mapper(&path).unwrap();
        assert_eq!(loaded.state_bytes(), mapper.state_bytes());
        assert_eq!(loaded.boundaries(), mapper.boundaries());

        let gen_path = dir.path().join("generator.ckpt");
        crate::generator::save_checkpoint(&gen, 0, "hash", &gen_path).unwrap();
        assert!(matches!(
            load_mapper(&gen_path),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn config_validation_and_defaults() {
        let config = MapperConfig::new(10, vec!["x".into()]);
        assert_eq!(config.lambda_l2, 0.5);
        assert_eq!(config.lambda_norm, 0.2);
        assert_eq!(config.boundaries, (4, 8));
        assert_eq!(config.batch_size, 2);
        assert_eq!(config.learning_rate, 0.002);
        config.validate().unwrap();

        let mut bad = config.clone();
        bad.iterations = 0;
        assert!(bad.validate().is_err());
        let mut bad = config.clone();
        bad.lambda_l2 = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = config.clone();
        bad.boundaries = (5, 2);
        assert!(bad.validate().is_err());
        let mut bad = config.clone();
        bad.backends.clear();
        assert!(bad.validate().is_err());

        let json: MapperConfig = serde_json::from_str(
            r#"{"iterations": 7, "backends": ["mean-rgb:32"]}"#,
        )
        .unwrap();
        assert_eq!(json.lambda_l2, 0.5);
        assert_eq!(json.boundaries, (4, 8));
    }
}
