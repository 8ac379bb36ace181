//! Latent mapping network `z -> w` and the shared fully connected layer
//! type. The mapping network is never trainable in this artifact, so its
//! forward pass only ever runs on constants.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// `y = x Wᵀ + b` with `weight [out, in]`, `bias [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Gaussian weights scaled by `1/sqrt(in_dim)`, constant bias.
    pub fn init(rng: &mut ChaCha20Rng, out_dim: usize, in_dim: usize, bias_init: f64) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::new(
            vec![out_dim, in_dim],
            (0..out_dim * in_dim)
                .map(|_| {
                    let n: f64 = rng.sample(StandardNormal);
                    n * scale
                })
                .collect(),
        );
        Linear {
            weight,
            bias: Tensor::full(vec![out_dim], bias_init),
        }
    }

    pub fn zeroed(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Apply with weights entering the graph as constants.
    pub fn graph_const(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        Self::graph_with(g, x, w, b)
    }

    /// Apply with caller-supplied weight/bias nodes (trainable use).
    pub fn graph_with(g: &mut Graph, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let wt = g.transpose2(weight);
        let y = g.matmul(x, wt);
        g.add(y, bias)
    }
}

/// Normalize each row of `[B, D]` by `sqrt(mean(x^2) + 1e-8)`.
pub fn pixel_norm_graph(g: &mut Graph, x: NodeId) -> NodeId {
    let d = *g.shape(x).last().expect("pixel norm needs a last axis") as f64;
    let sq = g.mul(x, x);
    let ss = g.sum_keep_last(sq);
    let ms = g.mul_scalar(ss, 1.0 / d);
    let shifted = g.add_scalar(ms, 1e-8);
    let norm = g.sqrt(shifted);
    g.div(x, norm)
}

/// Two fully connected layers with leaky-ReLU after each, preceded by pixel
/// normalization of the input latent.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingNetwork {
    pub fc: Vec<Linear>,
    pub z_dim: usize,
    pub w_dim: usize,
}

impl MappingNetwork {
    pub fn init(rng: &mut ChaCha20Rng, z_dim: usize, w_dim: usize) -> Self {
        let fc = vec![
            Linear::init(rng, w_dim, z_dim, 0.0),
            Linear::init(rng, w_dim, w_dim, 0.0),
        ];
        MappingNetwork { fc, z_dim, w_dim }
    }

    /// `[B, z_dim] -> [B, w_dim]`.
    pub fn forward(&self, z: &Tensor) -> Tensor {
        assert_eq!(z.shape().len(), 2, "mapping expects [B, z_dim]");
        assert_eq!(z.shape()[1], self.z_dim);
        let mut g = Graph::new();
        let mut x = g.constant(z.clone());
        x = pixel_norm_graph(&mut g, x);
        for lin in &self.fc {
            x = lin.graph_const(&mut g, x);
            x = g.leaky_relu(x, 0.2);
        }
        g.value(x).clone()
    }
}
