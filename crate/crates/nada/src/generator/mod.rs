//! Style-based generator: shared mapping network, modulated synthesis
//! stack, truncation, style mixing, freeze masks, weight interpolation, and
//! checkpoint persistence.
//!
//! The mapping network, per-layer affine style projections, and toRGB heads
//! are never trainable here; adaptation touches only synthesis-block
//! weights, biases, noise strengths, and the const input.

mod checkpoint;
pub mod mapping;
mod synthesis;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CheckpointSnapshot};
pub use mapping::{Linear, MappingNetwork};
pub use synthesis::{synthesis_graph, ForwardMode, SynthesisLayer};

use std::cell::RefCell;
use std::rc::Rc;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Latent samples used to estimate `w_avg` at construction.
const W_AVG_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub z_dim: usize,
    pub w_dim: usize,
    /// Side length of the const input (first stage).
    pub base_resolution: usize,
    /// Output channels per synthesis stage; length is the layer count L.
    pub channels: Vec<usize>,
}

impl Architecture {
    /// Desk-scale default: 4 stages ending at 32x32.
    pub fn toy() -> Self {
        Architecture {
            z_dim: 64,
            w_dim: 64,
            base_resolution: 4,
            channels: vec![16, 16, 8, 8],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn layer_resolution(&self, i: usize) -> usize {
        self.base_resolution << i
    }

    pub fn output_resolution(&self) -> usize {
        self.layer_resolution(self.channels.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0
            || self.w_dim == 0
            || self.base_resolution == 0
            || self.channels.is_empty()
            || self.channels.contains(&0)
        {
            return Err(Error::ArchitectureMismatch(format!(
                "invalid architecture {self:?}"
            )));
        }
        Ok(())
    }
}

pub struct StyleGenerator {
    arch: Architecture,
    mapping: Rc<RefCell<MappingNetwork>>,
    w_avg: Tensor,
    const_input: Tensor,
    layers: Vec<SynthesisLayer>,
    trainable_mask: Vec<bool>,
}

impl Clone for StyleGenerator {
    /// Deep-copies synthesis state but keeps the mapping network shared, so
    /// pair members route latents through one network.
    fn clone(&self) -> Self {
        StyleGenerator {
            arch: self.arch.clone(),
            mapping: Rc::clone(&self.mapping),
            w_avg: self.w_avg.clone(),
            const_input: self.const_input.clone(),
            layers: self.layers.clone(),
            trainable_mask: self.trainable_mask.clone(),
        }
    }
}

impl StyleGenerator {
    /// Seed-deterministic initialization; `w_avg` is estimated from
    /// [`W_AVG_SAMPLES`] mapped latents as part of construction.
    pub fn with_architecture(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mapping = MappingNetwork::init(&mut rng, arch.z_dim, arch.w_dim);

        let const_input = Tensor::new(
            vec![arch.channels[0], arch.base_resolution, arch.base_resolution],
            (0..arch.channels[0] * arch.base_resolution * arch.base_resolution)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let mut layers = Vec::with_capacity(arch.num_layers());
        for i in 0..arch.num_layers() {
            let in_ch = if i == 0 {
                arch.channels[0]
            } else {
                arch.channels[i - 1]
            };
            layers.push(SynthesisLayer::init(
                &mut rng,
                arch.w_dim,
                in_ch,
                arch.channels[i],
                arch.layer_resolution(i),
                i > 0,
            ));
        }

        let z = sample_z(W_AVG_SAMPLES, arch.z_dim, &mut rng);
        let w = mapping.forward(&z);
        let mut w_avg = vec![0.0; arch.w_dim];
        for row in 0..W_AVG_SAMPLES {
            for (acc, v) in w_avg.iter_mut().zip(w.row(row)) {
                *acc += v;
            }
        }
        for v in &mut w_avg {
            *v /= W_AVG_SAMPLES as f64;
        }

        let l = arch.num_layers();
        let w_avg = Tensor::new(vec![arch.w_dim], w_avg);
        Ok(StyleGenerator {
            arch,
            mapping: Rc::new(RefCell::new(mapping)),
            w_avg,
            const_input,
            layers,
            trainable_mask: vec![true; l],
        })
    }

    pub fn toy(seed: u64) -> Self {
        Self::with_architecture(Architecture::toy(), seed).expect("toy architecture is valid")
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        mapping: MappingNetwork,
        w_avg: Tensor,
        const_input: Tensor,
        layers: Vec<SynthesisLayer>,
    ) -> Self {
        let l = arch.num_layers();
        StyleGenerator {
            arch,
            mapping: Rc::new(RefCell::new(mapping)),
            w_avg,
            const_input,
            layers,
            trainable_mask: vec![true; l],
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_layers(&self) -> usize {
        self.arch.num_layers()
    }

    pub fn w_dim(&self) -> usize {
        self.arch.w_dim
    }

    pub fn z_dim(&self) -> usize {
        self.arch.z_dim
    }

    pub fn resolution(&self) -> usize {
        self.arch.output_resolution()
    }

    pub fn w_avg(&self) -> &Tensor {
        &self.w_avg
    }

    pub fn layers(&self) -> &[SynthesisLayer] {
        &self.layers
    }

    /// Handle to the mapping network shared across clones of this generator.
    pub fn shared_mapping(&self) -> Rc<RefCell<MappingNetwork>> {
        Rc::clone(&self.mapping)
    }

    pub fn sample_z(&self, n: usize, rng: &mut ChaCha20Rng) -> Tensor {
        sample_z(n, self.arch.z_dim, rng)
    }

    /// Truncated mapping: `w_avg + psi * (mapping(z) - w_avg)` per row.
    /// `psi = 1` returns the mapped code untouched; `psi = 0` collapses to
    /// `w_avg`, both exactly.
    pub fn map_to_w(&self, z: &Tensor, psi: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&psi) {
            return Err(Error::InvalidPsi(psi));
        }
        let w = self.mapping.borrow().forward(z);
        if psi == 1.0 {
            return Ok(w);
        }
        let b = w.shape()[0];
        let mut out = w;
        for row in 0..b {
            for (v, avg) in out.row_mut(row).iter_mut().zip(self.w_avg.data()) {
                *v = if psi == 0.0 {
                    *avg
                } else {
                    avg + psi * (*v - avg)
                };
            }
        }
        Ok(out)
    }

    /// Build the forward pass in `g`. `wplus` must be `[B, L, w_dim]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        wplus: NodeId,
        mode: ForwardMode,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let s = g.shape(wplus);
        if s.len() != 3 || s[1] != self.num_layers() || s[2] != self.arch.w_dim {
            return Err(Error::shape(
                format!("[B, {}, {}]", self.num_layers(), self.arch.w_dim),
                s,
            ));
        }
        Ok(synthesis_graph(
            g,
            wplus,
            &self.const_input,
            &self.layers,
            &self.trainable_mask,
            mode,
        ))
    }

    /// One image from one `[L, w_dim]` code.
    pub fn synthesize(&self, wplus: &Tensor) -> Result<Tensor> {
        let l = self.num_layers();
        let d = self.arch.w_dim;
        if wplus.shape() != [l, d] {
            return Err(Error::shape(format!("[{l}, {d}]"), wplus.shape()));
        }
        let batch = self
            .synthesize_batch(&wplus.clone().reshaped(vec![1, l, d]))?;
        let r = self.resolution();
        Ok(batch.reshaped(vec![3, r, r]))
    }

    /// Images from a `[B, L, w_dim]` batch.
    pub fn synthesize_batch(&self, wplus: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let node = g.constant(wplus.clone());
        let (img, _) = self.forward_graph(&mut g, node, ForwardMode::Frozen)?;
        Ok(g.value(img).clone())
    }

    /// Restrict training to `indices`; everything else freezes. The mapping,
    /// affine, and toRGB tensors are frozen no matter what.
    pub fn set_trainable_layers(&mut self, indices: &[usize]) -> Result<()> {
        let l = self.num_layers();
        for &i in indices {
            if i >= l {
                return Err(Error::LayerOutOfRange { index: i, layers: l });
            }
        }
        self.trainable_mask = vec![false; l];
        for &i in indices {
            self.trainable_mask[i] = true;
        }
        Ok(())
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable_mask
    }

    /// All tensors (weights and buffers) under their checkpoint names, in a
    /// fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        {
            let m = self.mapping.borrow();
            for (i, fc) in m.fc.iter().enumerate() {
                out.push((format!("mapping.fc{i}.weight"), fc.weight.clone()));
                out.push((format!("mapping.fc{i}.bias"), fc.bias.clone()));
            }
        }
        out.push(("w_avg".to_string(), self.w_avg.clone()));
        out.push(("const_input".to_string(), self.const_input.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.affine.weight"), layer.affine.weight.clone()));
            out.push((format!("layer{i}.affine.bias"), layer.affine.bias.clone()));
            out.push((format!("layer{i}.conv.weight"), layer.conv_weight.clone()));
            out.push((format!("layer{i}.conv.bias"), layer.conv_bias.clone()));
            out.push((format!("layer{i}.noise.strength"), layer.noise_strength.clone()));
            out.push((format!("layer{i}.noise.const"), layer.noise_const.clone()));
            out.push((
                format!("layer{i}.torgb.affine.weight"),
                layer.rgb_affine.weight.clone(),
            ));
            out.push((
                format!("layer{i}.torgb.affine.bias"),
                layer.rgb_affine.bias.clone(),
            ));
            out.push((format!("layer{i}.torgb.weight"), layer.rgb_weight.clone()));
            out.push((format!("layer{i}.torgb.bias"), layer.rgb_bias.clone()));
        }
        out
    }

    /// Mutable access to the tensors an optimizer may update. Frozen groups
    /// (mapping, affine, toRGB, noise buffers, `w_avg`) are not reachable.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name == "const_input" {
            return Some(&mut self.const_input);
        }
        let rest = name.strip_prefix("layer")?;
        let dot = rest.find('.')?;
        let idx: usize = rest[..dot].parse().ok()?;
        let layer = self.layers.get_mut(idx)?;
        match &rest[dot + 1..] {
            "conv.weight" => Some(&mut layer.conv_weight),
            "conv.bias" => Some(&mut layer.conv_bias),
            "noise.strength" => Some(&mut layer.noise_strength),
            _ => None,
        }
    }

    /// Test hook for rewiring weights the public API keeps frozen.
    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [SynthesisLayer] {
        &mut self.layers
    }

    /// Concatenated little-endian bytes of every tensor; equality means the
    /// generators are bit-identical.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.named_tensors() {
            out.extend(t.to_le_bytes());
        }
        out
    }
}

/// `n` standard-normal latent rows `[n, z_dim]`.
pub fn sample_z(n: usize, z_dim: usize, rng: &mut ChaCha20Rng) -> Tensor {
    assert!(n >= 1, "sample_z needs n >= 1");
    Tensor::new(
        vec![n, z_dim],
        (0..n * z_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// `[w_dim] -> [l, w_dim]`: the same code replicated for every layer.
pub fn broadcast_w(w: &Tensor, l: usize) -> Tensor {
    assert_eq!(w.shape().len(), 1, "broadcast_w takes a single code");
    let d = w.len();
    let mut data = Vec::with_capacity(l * d);
    for _ in 0..l {
        data.extend_from_slice(w.data());
    }
    Tensor::new(vec![l, d], data)
}

/// Batch version of [`broadcast_w`]: `[B, w_dim] -> [B, l, w_dim]`.
pub fn broadcast_w_batch(w: &Tensor, l: usize) -> Tensor {
    assert_eq!(w.shape().len(), 2, "broadcast_w_batch takes [B, w_dim]");
    let (b, d) = (w.shape()[0], w.shape()[1]);
    let mut data = Vec::with_capacity(b * l * d);
    for row in 0..b {
        for _ in 0..l {
            data.extend_from_slice(w.row(row));
        }
    }
    Tensor::new(vec![b, l, d], data)
}

/// Style mixing: with probability `mixing_prob` the rows `[c, l)` come from
/// `w_b` for a uniform crossover `c` in `[1, l)`; otherwise all rows are
/// `w_a`. With a single layer there is no valid crossover, so mixing never
/// triggers.
pub fn mixed_codes(
    w_a: &Tensor,
    w_b: &Tensor,
    mixing_prob: f64,
    rng: &mut ChaCha20Rng,
    l: usize,
) -> Tensor {
    assert!((0.0..=1.0).contains(&mixing_prob), "mixing_prob in [0,1]");
    assert_eq!(w_a.shape(), w_b.shape());
    let mut out = broadcast_w(w_a, l);
    if l >= 2 && rng.random_bool(mixing_prob) {
        let c = rng.random_range(1..l);
        for row in c..l {
            out.row_mut(row).copy_from_slice(w_b.data());
        }
    }
    out
}

pub struct GeneratorPair {
    pub frozen: StyleGenerator,
    pub trainable: StyleGenerator,
}

/// Clone a source generator into a frozen/trainable pair sharing one
/// mapping network. Both members produce bit-identical images at
/// construction because they run the same weights through the same code.
pub fn clone_pair(source: &StyleGenerator) -> GeneratorPair {
    let mut frozen = source.clone();
    frozen.trainable_mask = vec![false; source.num_layers()];
    let mut trainable = source.clone();
    trainable.trainable_mask = vec![true; source.num_layers()];
    GeneratorPair { frozen, trainable }
}

/// Parameterwise affine blend: every tensor is `a + t*(b-a)`. Endpoints
/// return exact copies, and blending a generator with itself is the identity
/// at any `t`.
pub fn interpolate_weights(
    a: &StyleGenerator,
    b: &StyleGenerator,
    t: f64,
) -> Result<StyleGenerator> {
    if a.arch != b.arch {
        return Err(Error::ArchitectureMismatch(format!(
            "{:?} vs {:?}",
            a.arch, b.arch
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidConfig(format!(
            "interpolation factor {t} outside [0,1]"
        )));
    }
    let lerp = |x: &Tensor, y: &Tensor| -> Tensor {
        if t == 0.0 {
            return x.clone();
        }
        if t == 1.0 {
            return y.clone();
        }
        Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| p + t * (q - p))
                .collect(),
        )
    };

    let (ma, mb) = (a.mapping.borrow(), b.mapping.borrow());
    let mapping = MappingNetwork {
        fc: ma
            .fc
            .iter()
            .zip(&mb.fc)
            .map(|(fa, fb)| Linear {
                weight: lerp(&fa.weight, &fb.weight),
                bias: lerp(&fa.bias, &fb.bias),
            })
            .collect(),
        z_dim: ma.z_dim,
        w_dim: ma.w_dim,
    };
    let layers = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| SynthesisLayer {
            affine: Linear {
                weight: lerp(&la.affine.weight, &lb.affine.weight),
                bias: lerp(&la.affine.bias, &lb.affine.bias),
            },
            conv_weight: lerp(&la.conv_weight, &lb.conv_weight),
            conv_bias: lerp(&la.conv_bias, &lb.conv_bias),
            noise_strength: lerp(&la.noise_strength, &lb.noise_strength),
            noise_const: lerp(&la.noise_const, &lb.noise_const),
            rgb_affine: Linear {
                weight: lerp(&la.rgb_affine.weight, &lb.rgb_affine.weight),
                bias: lerp(&la.rgb_affine.bias, &lb.rgb_affine.bias),
            },
            rgb_weight: lerp(&la.rgb_weight, &lb.rgb_weight),
            rgb_bias: lerp(&la.rgb_bias, &lb.rgb_bias),
            resolution: la.resolution,
            upsample: la.upsample,
        })
        .collect();
    Ok(StyleGenerator::from_parts(
        a.arch.clone(),
        mapping,
        lerp(&a.w_avg, &b.w_avg),
        lerp(&a.const_input, &b.const_input),
        layers,
    ))
}
