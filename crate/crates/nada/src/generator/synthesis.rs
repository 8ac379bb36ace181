//! Style-modulated synthesis blocks and the graph assembly for the full
//! synthesis pass.
//!
//! One code path builds the forward graph for every consumer: value-only
//! synthesis, frozen-generator references inside a training step, latent
//! optimization, and weight training. Which leaves enter as parameters is
//! the only difference, so a frozen clone is bit-identical to the trainable
//! one by construction.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

use super::mapping::Linear;

/// Clamp inside the demodulation square root.
const DEMOD_EPS: f64 = 1e-8;

/// One resolution stage: style-modulated 3x3 convolution with weight
/// demodulation, fixed per-layer noise, bias, activation, and a modulated
/// 1x1 toRGB head feeding the skip accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisLayer {
    /// `w -> per-input-channel style`; frozen.
    pub affine: Linear,
    /// `[C_out, C_in, 3, 3]`.
    pub conv_weight: Tensor,
    /// `[C_out]`.
    pub conv_bias: Tensor,
    /// `[1]`, scales the stored noise map.
    pub noise_strength: Tensor,
    /// `[1, 1, H, W]` fixed buffer; resampling would confound paired
    /// synthesis, so it is frozen at construction.
    pub noise_const: Tensor,
    /// `w -> per-feature-channel style` for the RGB head; frozen.
    pub rgb_affine: Linear,
    /// `[3, C_out, 1, 1]`; frozen.
    pub rgb_weight: Tensor,
    /// `[3]`; frozen.
    pub rgb_bias: Tensor,
    /// Output side length of this stage.
    pub resolution: usize,
    /// Whether the incoming features are upsampled 2x first.
    pub upsample: bool,
}

impl SynthesisLayer {
    pub fn init(
        rng: &mut ChaCha20Rng,
        w_dim: usize,
        in_ch: usize,
        out_ch: usize,
        resolution: usize,
        upsample: bool,
    ) -> Self {
        let conv_scale = 1.0 / ((in_ch * 9) as f64).sqrt();
        let conv_weight = Tensor::new(
            vec![out_ch, in_ch, 3, 3],
            (0..out_ch * in_ch * 9)
                .map(|_| {
                    let n: f64 = rng.sample(StandardNormal);
                    n * conv_scale
                })
                .collect(),
        );
        let noise_const = Tensor::new(
            vec![1, 1, resolution, resolution],
            (0..resolution * resolution)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let rgb_scale = 1.0 / (out_ch as f64).sqrt();
        let rgb_weight = Tensor::new(
            vec![3, out_ch, 1, 1],
            (0..3 * out_ch)
                .map(|_| {
                    let n: f64 = rng.sample(StandardNormal);
                    n * rgb_scale
                })
                .collect(),
        );
        SynthesisLayer {
            affine: Linear::init(rng, in_ch, w_dim, 1.0),
            conv_weight,
            conv_bias: Tensor::zeros(vec![out_ch]),
            noise_strength: Tensor::zeros(vec![1]),
            noise_const,
            rgb_affine: Linear::init(rng, out_ch, w_dim, 1.0),
            rgb_weight,
            rgb_bias: Tensor::zeros(vec![3]),
            resolution,
            upsample,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv_weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.conv_weight.shape()[0]
    }
}

/// How a generator's tensors enter a forward graph.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ForwardMode {
    /// Everything is a constant leaf.
    Frozen,
    /// Tensors of unmasked layers become gradient-taking parameters.
    Trainable,
}

fn leaf(
    g: &mut Graph,
    t: &Tensor,
    trainable: bool,
    name: String,
    params: &mut Vec<(String, NodeId)>,
) -> NodeId {
    if trainable {
        let id = g.param(t.clone());
        params.push((name, id));
        id
    } else {
        g.constant(t.clone())
    }
}

/// Assemble the synthesis forward pass. `wplus` is `[B, L, w_dim]`; the
/// result is the `[B, 3, R, R]` image node in `(0, 1)` plus the
/// (name, node) list of parameters that entered trainably.
pub fn synthesis_graph(
    g: &mut Graph,
    wplus: NodeId,
    const_input: &Tensor,
    layers: &[SynthesisLayer],
    trainable_mask: &[bool],
    mode: ForwardMode,
) -> (NodeId, Vec<(String, NodeId)>) {
    let shape = g.shape(wplus).to_vec();
    assert_eq!(shape.len(), 3, "synthesis expects [B, L, w_dim]");
    assert_eq!(shape[1], layers.len(), "one style row per layer");
    let batch = shape[0];
    let mut params = Vec::new();

    let trainable = |i: usize| mode == ForwardMode::Trainable && trainable_mask[i];

    // const input, broadcast over the batch
    let c0 = const_input.shape()[0];
    let base = const_input.shape()[1];
    let cin = leaf(
        g,
        const_input,
        trainable(0),
        "const_input".to_string(),
        &mut params,
    );
    let cin4 = g.reshape(cin, vec![1, c0, base, base]);
    let batch_zeros = g.constant(Tensor::zeros(vec![batch, 1, 1, 1]));
    let mut x = g.add(cin4, batch_zeros);

    let mut rgb: Option<NodeId> = None;
    for (i, layer) in layers.iter().enumerate() {
        let w_i = g.select_mid(wplus, i);
        if layer.upsample {
            x = g.upsample2x(x);
        }
        let (ci, co) = (layer.in_channels(), layer.out_channels());

        // modulate, convolve, demodulate
        let style = layer.affine.graph_const(g, w_i);
        let style4 = g.reshape(style, vec![batch, ci, 1, 1]);
        let xmod = g.mul(x, style4);
        let wconv = leaf(
            g,
            &layer.conv_weight,
            trainable(i),
            format!("layer{i}.conv.weight"),
            &mut params,
        );
        let mut y = g.conv2d(xmod, wconv, 1);
        let w2 = g.reshape(wconv, vec![co * ci, 9]);
        let wsq = g.mul(w2, w2);
        let k = g.sum_keep_last(wsq);
        let k2 = g.reshape(k, vec![co, ci]);
        let kt = g.transpose2(k2);
        let s2 = g.mul(style, style);
        let energy = g.matmul(s2, kt);
        let shifted = g.add_scalar(energy, DEMOD_EPS);
        let demod = g.pow_scalar(shifted, -0.5);
        let demod4 = g.reshape(demod, vec![batch, co, 1, 1]);
        y = g.mul(y, demod4);

        // fixed noise, bias, activation
        let strength = leaf(
            g,
            &layer.noise_strength,
            trainable(i),
            format!("layer{i}.noise.strength"),
            &mut params,
        );
        let nconst = g.constant(layer.noise_const.clone());
        let noise = g.mul(nconst, strength);
        y = g.add(y, noise);
        let bias = leaf(
            g,
            &layer.conv_bias,
            trainable(i),
            format!("layer{i}.conv.bias"),
            &mut params,
        );
        let bias3 = g.reshape(bias, vec![co, 1, 1]);
        y = g.add(y, bias3);
        y = g.leaky_relu(y, 0.2);

        // modulated 1x1 RGB head (no demodulation), skip accumulation
        let rgb_style = layer.rgb_affine.graph_const(g, w_i);
        let rgb_style4 = g.reshape(rgb_style, vec![batch, co, 1, 1]);
        let ymod = g.mul(y, rgb_style4);
        let wrgb = g.constant(layer.rgb_weight.clone());
        let mut r = g.conv2d(ymod, wrgb, 0);
        let rbias = g.constant(layer.rgb_bias.clone().reshaped(vec![3, 1, 1]));
        r = g.add(r, rbias);
        rgb = Some(match rgb {
            None => r,
            Some(prev) => {
                let up = g.upsample2x(prev);
                g.add(up, r)
            }
        });

        x = y;
    }

    let img = g.sigmoid(rgb.expect("at least one synthesis layer"));
    (img, params)
}
