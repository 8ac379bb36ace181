//! Adaptive layer freezing: rank synthesis layers by how far their W+ rows
//! travel under a short latent-only optimization, then keep only the top
//! movers trainable.

use std::collections::BTreeSet;

use rand_chacha::ChaCha20Rng;

use crate::embedding::EmbeddingBackend;
use crate::error::{Error, Result};
use crate::generator::{broadcast_w_batch, ForwardMode, StyleGenerator};
use crate::graph::Graph;
use crate::losses::global_clip_loss;

/// Step size for the ranking optimization. Plain gradient descent on
/// purpose: an adaptive optimizer equalizes per-coordinate step sizes on
/// its first step, which erases exactly the magnitude differences the
/// ranking measures.
pub const DEFAULT_LATENT_LR: f64 = 0.01;

/// Default number of latent codes ranked per round.
pub const DEFAULT_RANKING_BATCH: usize = 8;

/// Default number of latent optimization steps per round.
pub const DEFAULT_RANKING_ITERS: usize = 1;

/// Per-layer displacement scores from one ranking round.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRanking {
    scores: Vec<f64>,
    batch_size: usize,
    opt_iters: usize,
    k: Option<usize>,
}

impl LayerRanking {
    pub fn new(scores: Vec<f64>, batch_size: usize, opt_iters: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidConfig("ranking needs at least one layer".into()));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidConfig(
                "layer scores must be finite and nonnegative".into(),
            ));
        }
        Ok(LayerRanking {
            scores,
            batch_size,
            opt_iters,
            k: None,
        })
    }

    /// Records the selection size this ranking will be used with.
    pub fn with_k(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidK);
        }
        if k > self.scores.len() {
            return Err(Error::KTooLarge {
                k,
                available: self.scores.len(),
            });
        }
        self.k = Some(k);
        Ok(self)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn opt_iters(&self) -> usize {
        self.opt_iters
    }

    pub fn k(&self) -> Option<usize> {
        self.k
    }

    /// True when no layer moved at all, meaning the loss had no usable
    /// gradient and the ranking carries no signal.
    pub fn is_degenerate(&self) -> bool {
        self.scores.iter().all(|&s| s == 0.0)
    }
}

/// Scores every synthesis layer by optimizing a batch of latent codes
/// against the global loss while the generator stays fixed.
///
/// Samples `batch_size` codes in W, broadcasts them to W+, runs `opt_iters`
/// plain gradient-descent steps of size `latent_lr` on the codes, and
/// scores layer `i` as the mean L2 displacement of its W+ row. The
/// generator is read-only throughout; `opt_iters = 0` yields all-zero
/// scores.
pub fn rank_layers(
    generator: &StyleGenerator,
    target_text: &str,
    batch_size: usize,
    opt_iters: usize,
    latent_lr: f64,
    backends: &[Box<dyn EmbeddingBackend>],
    rng: &mut ChaCha20Rng,
) -> Result<LayerRanking> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig(
            "ranking batch size must be at least 1".into(),
        ));
    }
    if !latent_lr.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "latent learning rate {latent_lr} is not finite"
        )));
    }
    let layers = generator.num_layers();
    let z = generator.sample_z(batch_size, rng);
    let w = generator.map_to_w(&z, 1.0)?;
    let start = broadcast_w_batch(&w, layers);

    let mut current = start.clone();
    for _ in 0..opt_iters {
        let mut g = Graph::new();
        let wplus = g.param(current.clone());
        let (images, _) = generator.forward_graph(&mut g, wplus, ForwardMode::Frozen)?;
        let loss = global_clip_loss(&mut g, images, target_text, backends)?;
        let grads = g.backward(loss);
        // A generator whose styles ignore W yields no gradient path at all;
        // the codes then simply stay put.
        let Some(grad) = grads.get(wplus) else {
            break;
        };
        for (c, d) in current.data_mut().iter_mut().zip(grad.data()) {
            *c -= latent_lr * d;
        }
    }

    let w_dim = generator.w_dim();
    let mut scores = vec![0.0; layers];
    for (i, score) in scores.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in 0..batch_size {
            let offset = (b * layers + i) * w_dim;
            let sq: f64 = (offset..offset + w_dim)
                .map(|j| {
                    let d = current.data()[j] - start.data()[j];
                    d * d
                })
                .sum();
            acc += sq.sqrt();
        }
        *score = acc / batch_size as f64;
    }
    LayerRanking::new(scores, batch_size, opt_iters)
}

/// The `k` highest-scoring layer indices, skipping `always_frozen`. Ties
/// break towards the lower index.
pub fn select_top_k(
    ranking: &LayerRanking,
    k: usize,
    always_frozen: &BTreeSet<usize>,
) -> Result<BTreeSet<usize>> {
    let layers = ranking.scores.len();
    if k == 0 {
        return Err(Error::InvalidK);
    }
    let available = layers - always_frozen.iter().filter(|&&i| i < layers).count();
    if k > available {
        return Err(Error::KTooLarge { k, available });
    }
    let mut order: Vec<usize> = (0..layers)
        .filter(|i| !always_frozen.contains(i))
        .collect();
    order.sort_by(|&a, &b| {
        ranking.scores[b]
            .partial_cmp(&ranking.scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    Ok(order.into_iter().take(k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::embedding::MockBackend;
    use crate::generator::Architecture;
    use rand::prelude::*;

    fn tiny_arch() -> Architecture {
        Architecture {
            z_dim: 8,
            w_dim: 8,
            base_resolution: 4,
            channels: vec![4, 4, 4, 4],
        }
    }

    fn backends_for(res: usize) -> Vec<Box<dyn EmbeddingBackend>> {
        let mut backend = MockBackend::new(19, 12, res);
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let v: Vec<f64> = (0..12)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        backend.register_text("goal", &v).unwrap();
        vec![Box::new(backend)]
    }

    /// Zeroes both style projections of the given layers so their W+ rows
    /// have no influence on the image.
    fn detach_styles(generator: &mut StyleGenerator, layers: &[usize]) {
        for &i in layers {
            let layer = &mut generator.layers_mut()[i];
            layer.affine.weight = Tensor::zeros(layer.affine.weight.shape().to_vec());
            layer.rgb_affine.weight = Tensor::zeros(layer.rgb_affine.weight.shape().to_vec());
        }
    }

    #[test]
    fn zero_iterations_scores_nothing() {
        let generator = StyleGenerator::with_architecture(tiny_arch(), 3).unwrap();
        let backends = backends_for(32);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ranking = rank_layers(&generator, "goal", 2, 0, 0.01, &backends, &mut rng).unwrap();
        assert_eq!(ranking.scores(), &[0.0; 4]);
        assert!(ranking.is_degenerate());
    }

    #[test]
    fn only_styled_layer_accumulates_displacement() {
        let mut generator = StyleGenerator::with_architecture(tiny_arch(), 7).unwrap();
        detach_styles(&mut generator, &[0, 1, 3]);
        let backends = backends_for(32);
        let latent_lr = 0.01;

        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let probe_rng = rng.clone();
        let before = generator.state_bytes();
        let ranking =
            rank_layers(&generator, "goal", 4, 1, latent_lr, &backends, &mut rng).unwrap();
        assert_eq!(generator.state_bytes(), before, "ranking must not touch weights");

        let scores = ranking.scores();
        assert_eq!(scores[0], 0.0);
        assert_eq!(scores[1], 0.0);
        assert_eq!(scores[3], 0.0);
        assert!(scores[2] > 0.0);
        assert!(!ranking.is_degenerate());

        // Rebuild the same latent batch and differentiate the loss directly:
        // one plain step displaces row 2 by latent_lr times its gradient.
        let mut rng2 = probe_rng;
        let z = generator.sample_z(4, &mut rng2);
        let w = generator.map_to_w(&z, 1.0).unwrap();
        let wplus = broadcast_w_batch(&w, 4);
        let mut g = Graph::new();
        let node = g.param(wplus.clone());
        let (images, _) = generator
            .forward_graph(&mut g, node, ForwardMode::Frozen)
            .unwrap();
        let loss = global_clip_loss(&mut g, images, "goal", &backends).unwrap();
        let grads = g.backward(loss);
        let grad = grads.get(node).unwrap();
        let mut expected = 0.0;
        for b in 0..4 {
            let offset = (b * 4 + 2) * 8;
            let sq: f64 = grad.data()[offset..offset + 8]
                .iter()
                .map(|d| (latent_lr * d) * (latent_lr * d))
                .sum();
            expected += sq.sqrt();
        }
        expected /= 4.0;
        assert!(
            (scores[2] - expected).abs() < 1e-12,
            "score {} vs analytic displacement {expected}",
            scores[2]
        );

        // Anchor the analytic gradient itself with central differences on a
        // few coordinates of row 2.
        let eval = |codes: &Tensor| {
            let mut g = Graph::new();
            let node = g.constant(codes.clone());
            let (images, _) = generator
                .forward_graph(&mut g, node, ForwardMode::Frozen)
                .unwrap();
            let loss = global_clip_loss(&mut g, images, "goal", &backends).unwrap();
            g.value(loss).item()
        };
        let h = 1e-5;
        for j in [0usize, 3, 7] {
            let idx = 2 * 8 + j;
            let mut plus = wplus.clone();
            plus.data_mut()[idx] += h;
            let mut minus = wplus.clone();
            minus.data_mut()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grad.data()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((an - fd) / denom).abs() < 1e-3,
                "coord {j}: analytic {an}, fd {fd}"
            );
        }
    }

    #[test]
    fn ranking_is_deterministic_and_records_defaults() {
        let generator = StyleGenerator::with_architecture(tiny_arch(), 11).unwrap();
        let backends = backends_for(32);
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(23);
            rank_layers(
                &generator,
                "goal",
                DEFAULT_RANKING_BATCH,
                DEFAULT_RANKING_ITERS,
                DEFAULT_LATENT_LR,
                &backends,
                &mut rng,
            )
            .unwrap()
        };
        let first = run();
        let second = run();
        assert_eq!(first.scores(), second.scores());
        assert_eq!(first.batch_size(), 8);
        assert_eq!(first.opt_iters(), 1);
        assert!(first.k().is_none());
        let with_k = first.clone().with_k(2).unwrap();
        assert_eq!(with_k.k(), Some(2));
        assert!(matches!(
            first.clone().with_k(9),
            Err(Error::KTooLarge { k: 9, available: 4 })
        ));
        assert!(matches!(first.with_k(0), Err(Error::InvalidK)));
    }

    #[test]
    fn fully_detached_generator_is_flagged_degenerate() {
        let mut generator = StyleGenerator::with_architecture(tiny_arch(), 13).unwrap();
        detach_styles(&mut generator, &[0, 1, 2, 3]);
        let backends = backends_for(32);
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let ranking = rank_layers(&generator, "goal", 2, 2, 0.01, &backends, &mut rng).unwrap();
        assert_eq!(ranking.scores(), &[0.0; 4]);
        assert!(ranking.is_degenerate());
    }

    #[test]
    fn top_k_picks_highest_scores_with_low_index_ties() {
        let ranking = LayerRanking::new(vec![3.0, 1.0, 2.0], 1, 1).unwrap();
        let none = BTreeSet::new();
        let picked = select_top_k(&ranking, 2, &none).unwrap();
        assert_eq!(picked, BTreeSet::from([0, 2]));

        let tied = LayerRanking::new(vec![1.0, 1.0, 1.0], 1, 1).unwrap();
        assert_eq!(select_top_k(&tied, 1, &none).unwrap(), BTreeSet::from([0]));

        assert!(matches!(
            select_top_k(&ranking, 0, &none),
            Err(Error::InvalidK)
        ));
        let frozen = BTreeSet::from([0]);
        assert!(matches!(
            select_top_k(&ranking, 3, &frozen),
            Err(Error::KTooLarge { k: 3, available: 2 })
        ));
    }

    #[test]
    fn top_k_matches_selection_scan_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        for _ in 0..1000 {
            let layers = rng.random_range(3..10usize);
            let scores: Vec<f64> = (0..layers)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        // Quantized scores force ties through the tie rule.
                        rng.random_range(0..4) as f64 * 0.25
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect();
            let mut frozen = BTreeSet::new();
            for i in 0..layers {
                if rng.random_bool(0.2) {
                    frozen.insert(i);
                }
            }
            let available = layers - frozen.len();
            if available == 0 {
                continue;
            }
            let ranking = LayerRanking::new(scores.clone(), 1, 1).unwrap();

            let mut previous: Option<BTreeSet<usize>> = None;
            for k in 1..=available {
                let picked = select_top_k(&ranking, k, &frozen).unwrap();
                assert_eq!(picked.len(), k);
                assert!(picked.is_disjoint(&frozen));

                // Repeated greedy max scan, strict inequality keeping the
                // earliest index on ties.
                let mut oracle = BTreeSet::new();
                for _ in 0..k {
                    let mut best: Option<usize> = None;
                    for i in 0..layers {
                        if frozen.contains(&i) || oracle.contains(&i) {
                            continue;
                        }
                        if best.is_none_or(|b| scores[i] > scores[b]) {
                            best = Some(i);
                        }
                    }
                    oracle.insert(best.unwrap());
                }
                assert_eq!(picked, oracle, "scores {scores:?} frozen {frozen:?} k {k}");

                if let Some(prev) = &previous {
                    assert!(prev.is_subset(&picked), "k growth must nest selections");
                }
                previous = Some(picked);
            }
        }
    }
}
