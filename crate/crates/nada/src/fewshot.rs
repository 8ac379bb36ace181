//! Image-guided adaptation, discriminator catch-up, and sample export.
//!
//! Covers the pipeline around a small reference-image set: derive the
//! training direction from images instead of prompts, give a discriminator a
//! head start before external adversarial fine-tuning, and write synthetic
//! image sets with manifests for downstream tools.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{resolve_backends, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::generator::{broadcast_w_batch, Linear, StyleGenerator};
use crate::graph::{Graph, NodeId};
use crate::losses::fewshot_image_directions;
use crate::mapper::LatentMapper;
use crate::tensor::Tensor;
use crate::trainer::{quantize_channel, run_adaptation, AdamState, AdaptationConfig, AdaptationRun};

/// Decorrelates direction-estimation samples from the training stream.
const SOURCE_SAMPLE_SALT: u64 = 0x517c_c1b7_2722_0a95;

pub const DEFAULT_CATCHUP_STEPS: usize = 50;
pub const DEFAULT_R1_WEIGHT: f64 = 10.0;

const LRELU_SLOPE: f64 = 0.2;

/// Load every decodable image in `dir` (sorted by file name), center-crop to
/// square, and resize to `resolution`. Values land in `[0, 1]` channel-first.
pub fn load_image_dir(dir: &Path, resolution: usize) -> Result<Vec<Tensor>> {
    Ok(load_labeled_image_dir(dir, resolution)?
        .into_iter()
        .map(|(_, t)| t)
        .collect())
}

/// [`load_image_dir`] keeping each image's file stem as its label.
pub fn load_labeled_image_dir(dir: &Path, resolution: usize) -> Result<Vec<(String, Tensor)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyBatch);
    }
    paths
        .iter()
        .map(|p| {
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((label, load_image(p, resolution)?))
        })
        .collect()
}

fn load_image(path: &Path, resolution: usize) -> Result<Tensor> {
    let decoded = image::open(path)?.to_rgb8();
    let (w, h) = decoded.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&decoded, (w - side) / 2, (h - side) / 2, side, side)
        .to_image();
    let resized = image::imageops::resize(
        &cropped,
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut data = vec![0.0; 3 * resolution * resolution];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[(c * resolution + y as usize) * resolution + x as usize] =
                px.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, resolution, resolution], data))
}

/// The fixed generator samples a run uses to estimate its direction:
/// `extra_losses.source_samples` images drawn from a seed-derived stream.
pub fn source_sample_set(
    generator: &StyleGenerator,
    config: &AdaptationConfig,
) -> Result<Vec<Tensor>> {
    let n = config.extra_losses.source_samples;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ SOURCE_SAMPLE_SALT);
    let z = generator.sample_z(n, &mut rng);
    let w = generator.map_to_w(&z, 1.0)?;
    let codes = broadcast_w_batch(&w, generator.num_layers());
    let batch = generator.synthesize_batch(&codes)?;
    let r = generator.resolution();
    let per = 3 * r * r;
    Ok((0..n)
        .map(|i| Tensor::new(vec![3, r, r], batch.data()[i * per..(i + 1) * per].to_vec()))
        .collect())
}

/// Adaptation driven by reference images: the embedding direction is the
/// mean shift from a fixed set of generator samples to `real_images`,
/// computed once before the loop. Everything else matches the text path,
/// including the run-directory layout.
pub fn adapt_with_images(
    source: &StyleGenerator,
    real_images: &[Tensor],
    config: &AdaptationConfig,
    run_dir: &Path,
) -> Result<AdaptationRun> {
    config.validate()?;
    let backends = resolve_backends(&config.backends)?;
    adapt_with_images_and_backends(source, real_images, config, &backends, run_dir)
}

pub fn adapt_with_images_and_backends(
    source: &StyleGenerator,
    real_images: &[Tensor],
    config: &AdaptationConfig,
    backends: &[Box<dyn EmbeddingBackend>],
    run_dir: &Path,
) -> Result<AdaptationRun> {
    config.validate()?;
    if real_images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let samples = source_sample_set(source, config)?;
    let directions = fewshot_image_directions(real_images, &samples, backends)?;
    run_adaptation(source, config, backends, &directions, run_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatchupConfig {
    #[serde(default = "default_catchup_steps")]
    pub steps: usize,
    #[serde(default = "default_catchup_batch")]
    pub batch_size: usize,
    #[serde(default = "default_catchup_lr")]
    pub learning_rate: f64,
    /// Gradient penalty weight on real images; `None` disables the term.
    #[serde(default = "default_r1_weight")]
    pub r1_weight: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_catchup_steps() -> usize {
    DEFAULT_CATCHUP_STEPS
}

fn default_catchup_batch() -> usize {
    4
}

fn default_catchup_lr() -> f64 {
    0.002
}

fn default_r1_weight() -> Option<f64> {
    Some(DEFAULT_R1_WEIGHT)
}

impl Default for CatchupConfig {
    fn default() -> Self {
        CatchupConfig {
            steps: DEFAULT_CATCHUP_STEPS,
            batch_size: 4,
            learning_rate: 0.002,
            r1_weight: Some(DEFAULT_R1_WEIGHT),
            seed: 0,
        }
    }
}

impl CatchupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be finite and positive",
                self.learning_rate
            )));
        }
        if let Some(w) = self.r1_weight {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "r1_weight {w} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Three-layer MLP over flattened pixels: enough structure to separate toy
/// real/fake sets, small enough that its input gradient has a closed form.
#[derive(Clone)]
pub struct Discriminator {
    resolution: usize,
    hidden: usize,
    layers: Vec<Linear>,
}

impl Discriminator {
    pub fn new(resolution: usize, hidden: usize, seed: u64) -> Self {
        assert!(resolution >= 1 && hidden >= 1);
        let input = 3 * resolution * resolution;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = vec![
            Linear::init(&mut rng, hidden, input, 0.0),
            Linear::init(&mut rng, hidden, hidden, 0.0),
            Linear::init(&mut rng, 1, hidden, 0.0),
        ];
        Discriminator {
            resolution,
            hidden,
            layers,
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, fc)| {
                [
                    (format!("fc{i}.weight"), fc.weight.clone()),
                    (format!("fc{i}.bias"), fc.bias.clone()),
                ]
            })
            .collect()
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (fc, field) = name.split_once('.')?;
        let i: usize = fc.strip_prefix("fc")?.parse().ok()?;
        let layer = self.layers.get_mut(i)?;
        match field {
            "weight" => Some(&mut layer.weight),
            "bias" => Some(&mut layer.bias),
            _ => None,
        }
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    /// Weights as fresh parameter nodes, shared across every forward pass in
    /// the graph so gradients accumulate in one place.
    pub fn graph_params(&self, g: &mut Graph) -> Vec<(String, NodeId)> {
        self.named_tensors()
            .into_iter()
            .map(|(name, t)| (name, g.param(t)))
            .collect()
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("[B, 3, R, R]", shape));
        }
        if shape[2] != self.resolution || shape[3] != self.resolution {
            return Err(Error::ResolutionMismatch {
                disc: self.resolution,
                gen: shape[2],
            });
        }
        Ok(shape[0])
    }

    /// Logits for a `[B, 3, R, R]` node, `[B, 1]`. With `params` the pass
    /// uses those nodes (training); without, weights enter as constants.
    /// Also returns the two hidden pre-activations for penalty terms.
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        images: NodeId,
        params: Option<&[(String, NodeId)]>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let b = self.check_images(&g.shape(images).to_vec())?;
        let input = 3 * self.resolution * self.resolution;
        let mut h = g.reshape(images, vec![b, input]);
        let mut preacts = Vec::new();
        for (i, fc) in self.layers.iter().enumerate() {
            h = match params {
                Some(nodes) => {
                    let w = nodes[2 * i].1;
                    let bias = nodes[2 * i + 1].1;
                    Linear::graph_with(g, h, w, bias)
                }
                None => fc.graph_const(g, h),
            };
            if i + 1 < self.layers.len() {
                preacts.push(h);
                h = g.leaky_relu(h, LRELU_SLOPE);
            }
        }
        Ok((h, preacts))
    }

    /// One image's logit; positive means "real".
    pub fn logit(&self, image: &Tensor) -> Result<f64> {
        let r = self.resolution;
        image.expect_shape(&[3, r, r])?;
        let mut g = Graph::new();
        let node = g.constant(image.clone().reshaped(vec![1, 3, r, r]));
        let (logits, _) = self.logits_graph(&mut g, node, None)?;
        Ok(g.value(logits).item())
    }

    /// Mean squared input gradient of the logit over the batch, built from
    /// the closed form for this MLP. The leaky-relu derivative masks are
    /// fixed at the forward values (they are piecewise constant in the
    /// input), so differentiating this node through the tape yields the
    /// penalty's true parameter gradient almost everywhere.
    pub fn r1_penalty_graph(
        &self,
        g: &mut Graph,
        params: &[(String, NodeId)],
        preacts: &[NodeId],
    ) -> NodeId {
        assert_eq!(preacts.len(), 2, "penalty expects both hidden layers");
        let mask = |g: &mut Graph, pre: NodeId| {
            let v = g.value(pre);
            let data: Vec<f64> = v
                .data()
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else { LRELU_SLOPE })
                .collect();
            g.constant(Tensor::new(v.shape().to_vec(), data))
        };
        let mask0 = mask(g, preacts[0]);
        let mask1 = mask(g, preacts[1]);
        let w0 = params[0].1;
        let w1 = params[2].1;
        let w2 = params[4].1;
        let w2_row = g.reshape(w2, vec![self.hidden]);
        let t1 = g.mul(mask1, w2_row);
        let t1w = g.matmul(t1, w1);
        let t0 = g.mul(t1w, mask0);
        let grad_x = g.matmul(t0, w0);
        let sq = g.mul(grad_x, grad_x);
        let per_sample = g.sum_keep_last(sq);
        g.mean_all(per_sample)
    }
}

/// Persist a discriminator as a container archive (kind `discriminator`).
pub fn save_discriminator(disc: &Discriminator, path: &Path) -> Result<()> {
    let manifest = serde_json::json!({
        "kind": "discriminator",
        "resolution": disc.resolution,
        "hidden": disc.hidden,
    });
    crate::container::write_archive(path, &manifest, &disc.named_tensors())
}

pub fn load_discriminator(path: &Path) -> Result<Discriminator> {
    let (manifest, tensors) = crate::container::read_archive(path)?;
    let bad = |reason: String| Error::checkpoint(path, reason);
    if manifest["kind"].as_str() != Some("discriminator") {
        return Err(bad(format!(
            "kind {:?} is not a discriminator archive",
            manifest["kind"]
        )));
    }
    let field = |name: &str| -> Result<usize> {
        manifest[name]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| bad(format!("missing or invalid {name}")))
    };
    let resolution = field("resolution")?;
    let hidden = field("hidden")?;
    if resolution < 1 || hidden < 1 {
        return Err(bad("resolution and hidden must be positive".into()));
    }
    let mut disc = Discriminator::new(resolution, hidden, 0);
    let expected: Vec<String> = disc.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut seen = Vec::new();
    for (name, tensor) in tensors {
        let slot = disc
            .tensor_mut(&name)
            .ok_or_else(|| bad(format!("unexpected array {name:?}")))?;
        tensor.expect_shape(slot.shape())?;
        *slot = tensor;
        seen.push(name);
    }
    for name in &expected {
        if !seen.contains(name) {
            return Err(bad(format!("missing array {name:?}")));
        }
    }
    Ok(disc)
}

/// Fraction of `reals` scored positive plus `fakes` scored negative.
pub fn classification_accuracy(
    disc: &Discriminator,
    reals: &[Tensor],
    fakes: &[Tensor],
) -> Result<f64> {
    let total = reals.len() + fakes.len();
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    for img in reals {
        if disc.logit(img)? > 0.0 {
            correct += 1;
        }
    }
    for img in fakes {
        if disc.logit(img)? <= 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

fn stack_images(images: &[&Tensor], resolution: usize) -> Tensor {
    let per = 3 * resolution * resolution;
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), 3, resolution, resolution], data)
}

/// Update only the discriminator: non-saturating logistic loss on generator
/// fakes vs `real_images`, optional gradient penalty on the reals. The
/// generator is read-only throughout; `steps == 0` returns the input
/// discriminator bit-for-bit.
pub fn discriminator_catchup(
    generator: &StyleGenerator,
    disc: Discriminator,
    real_images: &[Tensor],
    config: &CatchupConfig,
) -> Result<Discriminator> {
    config.validate()?;
    if real_images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let r = generator.resolution();
    if disc.resolution() != r {
        return Err(Error::ResolutionMismatch {
            disc: disc.resolution(),
            gen: r,
        });
    }
    for img in real_images {
        img.expect_shape(&[3, r, r])?;
    }
    let mut disc = disc;
    let mut opt = AdamState::new(config.learning_rate);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    for iter in 0..config.steps {
        let z = generator.sample_z(config.batch_size, &mut rng);
        let w = generator.map_to_w(&z, 1.0)?;
        let codes = broadcast_w_batch(&w, generator.num_layers());
        let fakes = generator.synthesize_batch(&codes)?;
        let real_refs: Vec<&Tensor> = (0..config.batch_size)
            .map(|_| &real_images[rng.random_range(0..real_images.len())])
            .collect();
        let reals = stack_images(&real_refs, r);

        let mut g = Graph::new();
        let real_node = g.constant(reals);
        let fake_node = g.constant(fakes);
        let params = disc.graph_params(&mut g);
        let (real_logits, real_preacts) = disc.logits_graph(&mut g, real_node, Some(&params))?;
        let (fake_logits, _) = disc.logits_graph(&mut g, fake_node, Some(&params))?;

        let neg_real = g.neg(real_logits);
        let sp_real = g.softplus(neg_real);
        let real_term = g.mean_all(sp_real);
        let sp_fake = g.softplus(fake_logits);
        let fake_term = g.mean_all(sp_fake);
        let mut total = g.add(real_term, fake_term);
        if let Some(weight) = config.r1_weight {
            if weight > 0.0 {
                let penalty = disc.r1_penalty_graph(&mut g, &params, &real_preacts);
                let scaled = g.mul_scalar(penalty, weight / 2.0);
                total = g.add(total, scaled);
            }
        }

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
            let value = disc.tensor_mut(&name).expect("params map to registry names");
            opt.apply(&name, value, &grad);
        }
    }
    Ok(disc)
}

/// What an export wrote: the manifest file mirrors these fields as
/// `key value` lines, one per line, plus `error <reason>` when a run stopped
/// short.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportManifest {
    pub seed: u64,
    pub count: usize,
    pub psi: f64,
    pub checkpoint_hash: String,
    pub error: Option<String>,
}

impl ExportManifest {
    fn render(&self) -> String {
        let mut text = format!(
            "seed {}\ncount {}\npsi {}\ncheckpoint {}\n",
            self.seed, self.count, self.psi, self.checkpoint_hash
        );
        if let Some(reason) = &self.error {
            text.push_str(&format!("error {reason}\n"));
        }
        text
    }
}

/// Digest naming the exact weights a sample set came from.
pub fn generator_hash(generator: &StyleGenerator) -> String {
    let mut hasher = Sha256::new();
    hasher.update(generator.state_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn export_core(
    generator: &StyleGenerator,
    mapper: Option<&LatentMapper>,
    n: usize,
    psi: f64,
    out_dir: &Path,
    seed: u64,
) -> Result<ExportManifest> {
    fs::create_dir_all(out_dir)?;
    let r = generator.resolution();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut manifest = ExportManifest {
        seed,
        count: 0,
        psi,
        checkpoint_hash: generator_hash(generator),
        error: None,
    };
    for i in 0..n {
        let z = generator.sample_z(1, &mut rng);
        let w = generator.map_to_w(&z, psi)?;
        let mut codes = broadcast_w_batch(&w, generator.num_layers());
        if let Some(m) = mapper {
            codes = m.apply(&codes)?;
        }
        let image = generator.synthesize_batch(&codes)?;
        let mut buf = vec![0u8; 3 * r * r];
        for c in 0..3 {
            for y in 0..r {
                for x in 0..r {
                    buf[(y * r + x) * 3 + c] = quantize_channel(image.data()[(c * r + y) * r + x]);
                }
            }
        }
        let png = image::RgbImage::from_raw(r as u32, r as u32, buf)
            .expect("buffer length matches dimensions");
        let path = out_dir.join(format!("img_{i:07}.png"));
        if let Err(e) = png.save(&path) {
            // Leave a truthful partial manifest behind, then surface the
            // failure.
            manifest.error = Some(e.to_string());
            let _ = fs::write(out_dir.join("manifest.txt"), manifest.render());
            return Err(e.into());
        }
        manifest.count += 1;
    }
    fs::write(out_dir.join("manifest.txt"), manifest.render())?;
    Ok(manifest)
}

/// Synthetic training set for external fine-tuning; codes optionally pass
/// through a latent mapper first. Full-diversity sampling (psi = 1).
pub fn synthesize_finetune_set(
    generator: &StyleGenerator,
    mapper: Option<&LatentMapper>,
    n: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<ExportManifest> {
    export_core(generator, mapper, n, 1.0, out_dir, seed)
}

/// Sample export for external evaluation tooling.
pub fn export_samples(
    generator: &StyleGenerator,
    n: usize,
    truncation_psi: f64,
    out_dir: &Path,
    seed: u64,
) -> Result<ExportManifest> {
    export_core(generator, None, n, truncation_psi, out_dir, seed)
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

    fn mean_rgb_backends(res: usize) -> Vec<Box<dyn EmbeddingBackend>> {
        vec![Box::new(MockBackend::mean_rgb(res))]
    }

    fn image_config(iterations: usize) -> AdaptationConfig {
        let mut c = AdaptationConfig::new(
            "source images",
            "reference images",
            iterations,
            vec!["unused".into()],
        );
        c.mixing_prob = 0.0;
        c.snapshot_every = 1000;
        c
    }

    fn color_shifted(images: &[Tensor], dr: f64, db: f64) -> Vec<Tensor> {
        images
            .iter()
            .map(|img| {
                let mut out = img.clone();
                let px = img.len() / 3;
                for i in 0..px {
                    out.data_mut()[i] = (out.data_mut()[i] + dr).clamp(0.0, 1.0);
                    out.data_mut()[2 * px + i] = (out.data_mut()[2 * px + i] + db).clamp(0.0, 1.0);
                }
                out
            })
            .collect()
    }

    #[test]
    fn image_dir_loading_crops_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        // 6x4 all-red and 4x6 all-green, written out of name order.
        let red = image::RgbImage::from_pixel(6, 4, image::Rgb([255, 0, 0]));
        red.save(dir.path().join("b_red.png")).unwrap();
        let green = image::RgbImage::from_pixel(4, 6, image::Rgb([0, 255, 0]));
        green.save(dir.path().join("a_green.png")).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();

        let images = load_image_dir(dir.path(), 8).unwrap();
        assert_eq!(images.len(), 2);
        for img in &images {
            assert_eq!(img.shape(), [3, 8, 8]);
        }
        // Sorted order: green first. Solid colors survive crop and resize.
        assert!((images[0].data()[64] - 1.0).abs() < 1e-6, "green channel");
        assert!(images[0].data()[0] < 1e-6, "red channel of green image");
        assert!((images[1].data()[0] - 1.0).abs() < 1e-6, "red channel");

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image_dir(empty.path(), 8),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn identical_reference_and_source_sets_are_degenerate() {
        let gen = tiny_gen(31);
        let mut config = image_config(10);
        config.extra_losses.source_samples = 1;
        let backends = mean_rgb_backends(32);
        let samples = source_sample_set(&gen, &config).unwrap();
        assert_eq!(samples.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        let result =
            adapt_with_images_and_backends(&gen, &samples, &config, &backends, dir.path());
        assert!(matches!(result, Err(Error::DegenerateDirection)));
    }

    #[test]
    fn color_shifted_references_converge_like_the_text_task() {
        let gen = tiny_gen(33);
        let backends = mean_rgb_backends(32);
        let mut config = image_config(150);
        config.learning_rate = 0.01;
        config.seed = 5;
        config.extra_losses.source_samples = 4;
        let samples = source_sample_set(&gen, &config).unwrap();
        // Four reference images: the source samples pushed toward red.
        let references = color_shifted(&samples, 0.3, -0.15);
        let directions = fewshot_image_directions(&references, &samples, &backends).unwrap();
        let delta_t = directions[0].values().clone();

        let dir = tempfile::tempdir().unwrap();
        let run =
            adapt_with_images_and_backends(&gen, &references, &config, &backends, dir.path())
                .unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let z = gen.sample_z(8, &mut rng);
        let w = gen.map_to_w(&z, 1.0).unwrap();
        let codes = broadcast_w_batch(&w, gen.num_layers());
        let res = gen.resolution();
        let frozen_imgs = run.frozen.synthesize_batch(&codes).unwrap();
        let train_imgs = run.trainable.synthesize_batch(&codes).unwrap();
        let mut mean_cos = 0.0;
        for b in 0..8 {
            let slice = |t: &Tensor| {
                Tensor::new(
                    vec![3, res, res],
                    t.data()[b * 3 * res * res..(b + 1) * 3 * res * res].to_vec(),
                )
            };
            let ef = backends[0].embed_image(&slice(&frozen_imgs)).unwrap();
            let et = backends[0].embed_image(&slice(&train_imgs)).unwrap();
            let di = et.sub(&ef);
            mean_cos += di.dot(&delta_t) / (di.l2_norm() * delta_t.l2_norm()) / 8.0;
        }
        assert!(
            mean_cos > 0.9,
            "image-driven run should align with the reference shift, got {mean_cos}"
        );
    }

    #[test]
    fn catchup_zero_steps_is_identity_and_generator_never_moves() {
        let gen = tiny_gen(41);
        let disc = Discriminator::new(32, 16, 1);
        let disc_bytes = disc.state_bytes();
        let gen_bytes = gen.state_bytes();
        let reals = vec![Tensor::full(vec![3, 32, 32], 0.9); 3];

        let mut config = CatchupConfig::default();
        config.steps = 0;
        let out = discriminator_catchup(&gen, disc.clone(), &reals, &config).unwrap();
        assert_eq!(out.state_bytes(), disc_bytes);

        config.steps = 10;
        config.learning_rate = 0.01;
        let _ = discriminator_catchup(&gen, disc, &reals, &config).unwrap();
        assert_eq!(gen.state_bytes(), gen_bytes);
    }

    #[test]
    fn discriminator_archive_round_trips_and_rejects_other_kinds() {
        let disc = Discriminator::new(16, 8, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        save_discriminator(&disc, &path).unwrap();
        let loaded = load_discriminator(&path).unwrap();
        assert_eq!(loaded.state_bytes(), disc.state_bytes());
        assert_eq!(loaded.resolution(), 16);

        let gen = tiny_gen(1);
        let gen_path = dir.path().join("g.ckpt");
        crate::generator::save_checkpoint(&gen, 0, "h", &gen_path).unwrap();
        assert!(matches!(
            load_discriminator(&gen_path),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn catchup_rejects_resolution_mismatch() {
        let gen = tiny_gen(42);
        let disc = Discriminator::new(16, 8, 1);
        let reals = vec![Tensor::full(vec![3, 16, 16], 0.5)];
        assert!(matches!(
            discriminator_catchup(&gen, disc, &reals, &CatchupConfig::default()),
            Err(Error::ResolutionMismatch { disc: 16, gen: 32 })
        ));
    }

    #[test]
    fn catchup_separates_constructed_real_and_fake_sets() {
        let gen = tiny_gen(43);
        let disc = Discriminator::new(32, 16, 7);
        // Bright reals with a deterministic per-image offset; generator
        // outputs sit near mid-gray, so the sets are linearly separable.
        let reals: Vec<Tensor> = (0..6)
            .map(|i| Tensor::full(vec![3, 32, 32], 0.85 + 0.02 * i as f64))
            .collect();
        let mut config = CatchupConfig::default();
        config.learning_rate = 0.05;
        config.seed = 3;
        // The gradient penalty only slows the boundary here; correctness of
        // its gradient has its own test.
        config.r1_weight = None;
        let trained = discriminator_catchup(&gen, disc, &reals, &config).unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let z = gen.sample_z(8, &mut rng);
        let w = gen.map_to_w(&z, 1.0).unwrap();
        let codes = broadcast_w_batch(&w, gen.num_layers());
        let batch = gen.synthesize_batch(&codes).unwrap();
        let fakes: Vec<Tensor> = (0..8)
            .map(|i| {
                Tensor::new(
                    vec![3, 32, 32],
                    batch.data()[i * 3 * 32 * 32..(i + 1) * 3 * 32 * 32].to_vec(),
                )
            })
            .collect();
        let accuracy = classification_accuracy(&trained, &reals, &fakes).unwrap();
        assert!(
            accuracy > 0.9,
            "separable sets should classify cleanly, got {accuracy}"
        );
    }

    #[test]
    fn r1_penalty_gradient_matches_finite_differences() {
        let disc = Discriminator::new(8, 6, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let images = Tensor::new(
            vec![2, 3, 8, 8],
            (0..2 * 3 * 64)
                .map(|_| rng.random_range(0.05..0.95))
                .collect(),
        );

        let penalty_value = |d: &Discriminator| {
            let mut g = Graph::new();
            let node = g.constant(images.clone());
            let params = d.graph_params(&mut g);
            let (_, preacts) = d.logits_graph(&mut g, node, Some(&params)).unwrap();
            let p = d.r1_penalty_graph(&mut g, &params, &preacts);
            g.value(p).item()
        };

        let mut g = Graph::new();
        let node = g.constant(images.clone());
        let params = disc.graph_params(&mut g);
        let (_, preacts) = disc.logits_graph(&mut g, node, Some(&params)).unwrap();
        let p = disc.r1_penalty_graph(&mut g, &params, &preacts);
        let grads = g.backward(p);

        let h = 1e-5;
        // Spot-check a few coordinates in each weight matrix.
        for (pi, flat_idx) in [(0usize, 3usize), (0, 40), (2, 5), (4, 2)] {
            let (name, node) = &params[pi];
            let analytic = grads.get(*node).expect("penalty reaches weights").data()
                [flat_idx];
            let mut plus = disc.clone();
            plus.tensor_mut(name).unwrap().data_mut()[flat_idx] += h;
            let mut minus = disc.clone();
            minus.tensor_mut(name).unwrap().data_mut()[flat_idx] -= h;
            let fd = (penalty_value(&plus) - penalty_value(&minus)) / (2.0 * h);
            let rel = (analytic - fd).abs() / fd.abs().max(1e-9);
            assert!(
                rel < 1e-3,
                "{name}[{flat_idx}]: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn export_is_deterministic_and_psi_zero_collapses() {
        let gen = tiny_gen(51);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let m1 = export_samples(&gen, 3, 0.7, dir_a.path(), 9).unwrap();
        let m2 = export_samples(&gen, 3, 0.7, dir_b.path(), 9).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.count, 3);
        for i in 0..3 {
            let name = format!("img_{i:07}.png");
            assert_eq!(
                fs::read(dir_a.path().join(&name)).unwrap(),
                fs::read(dir_b.path().join(&name)).unwrap()
            );
        }
        let manifest = fs::read_to_string(dir_a.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("seed 9"));
        assert!(manifest.contains("count 3"));
        assert!(manifest.contains("psi 0.7"));
        assert!(manifest.contains(&format!("checkpoint {}", generator_hash(&gen))));
        assert!(!manifest.contains("error"));

        // psi = 0 truncates every code to w_avg: all images identical.
        let dir_c = tempfile::tempdir().unwrap();
        export_samples(&gen, 3, 0.0, dir_c.path(), 9).unwrap();
        let first = fs::read(dir_c.path().join("img_0000000.png")).unwrap();
        for i in 1..3 {
            assert_eq!(
                fs::read(dir_c.path().join(format!("img_{i:07}.png"))).unwrap(),
                first
            );
        }
    }

    #[test]
    fn export_failure_leaves_partial_manifest() {
        let gen = tiny_gen(52);
        let dir = tempfile::tempdir().unwrap();
        // A directory squatting on the second file name forces a save error.
        fs::create_dir_all(dir.path().join("img_0000001.png")).unwrap();
        let err = export_samples(&gen, 3, 1.0, dir.path(), 1);
        assert!(err.is_err());
        assert!(dir.path().join("img_0000000.png").is_file());
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("count 1"));
        assert!(manifest.contains("error "));
    }

    #[test]
    fn finetune_set_respects_the_mapper() {
        let gen = tiny_gen(53);
        let identity = LatentMapper::new(4, 8, (4, 8), 0).unwrap();
        let dir_plain = tempfile::tempdir().unwrap();
        let dir_mapped = tempfile::tempdir().unwrap();
        synthesize_finetune_set(&gen, None, 2, dir_plain.path(), 4).unwrap();
        synthesize_finetune_set(&gen, Some(&identity), 2, dir_mapped.path(), 4).unwrap();
        // Zero-initialized mapper is the identity, so outputs match exactly.
        for i in 0..2 {
            let name = format!("img_{i:07}.png");
            assert_eq!(
                fs::read(dir_plain.path().join(&name)).unwrap(),
                fs::read(dir_mapped.path().join(&name)).unwrap()
            );
        }

        // A trained mapper moves codes, so at least one image changes.
        let backends = mean_rgb_backends(32);
        let mut s = [0.0f64; 3];
        {
            let mut rng = ChaCha20Rng::seed_from_u64(3);
            let z = gen.sample_z(4, &mut rng);
            let w = gen.map_to_w(&z, 1.0).unwrap();
            let codes = broadcast_w_batch(&w, 4);
            let imgs = gen.synthesize_batch(&codes).unwrap();
            for b in 0..4 {
                let img = Tensor::new(
                    vec![3, 32, 32],
                    imgs.data()[b * 3 * 32 * 32..(b + 1) * 3 * 32 * 32].to_vec(),
                );
                let e = backends[0].embed_image(&img).unwrap();
                for c in 0..3 {
                    s[c] += e.data()[c] / 4.0;
                }
            }
        }
        let mut t = [s[1], -s[0], 0.0];
        normalize_in_place(&mut t);
        let mut registered = MockBackend::mean_rgb(32);
        registered.register_text("goal", &t).unwrap();
        let reg_backends: Vec<Box<dyn EmbeddingBackend>> = vec![Box::new(registered)];
        let mut mconfig = crate::mapper::MapperConfig::new(30, vec!["unused".into()]);
        mconfig.learning_rate = 0.05;
        let trained =
            crate::mapper::train_mapper_with_backends(&gen, "goal", &mconfig, &reg_backends)
                .unwrap();
        let dir_trained = tempfile::tempdir().unwrap();
        synthesize_finetune_set(&gen, Some(&trained), 2, dir_trained.path(), 4).unwrap();
        let changed = (0..2).any(|i| {
            let name = format!("img_{i:07}.png");
            fs::read(dir_plain.path().join(&name)).unwrap()
                != fs::read(dir_trained.path().join(&name)).unwrap()
        });
        assert!(changed, "a trained mapper should alter the synthetic set");
    }
}
