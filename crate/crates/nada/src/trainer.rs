//! Adaptation loop over a frozen/trainable generator pair.
//!
//! Each iteration synthesizes the same latent codes through both members,
//! scores the trainable output against a fixed embedding-space direction,
//! and applies one Adam step to the unfrozen weights. Runs write a fixed
//! directory layout: `checkpoints/iter_NNNNNN.ckpt`, `grids/iter_NNNNNN.png`,
//! and a `run.log` with one line per iteration.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{resolve_backends, text_directions, DirectionVector, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::generator::{
    broadcast_w_batch, clone_pair, mixed_codes, save_checkpoint, CheckpointSnapshot, ForwardMode,
    GeneratorPair, StyleGenerator,
};
use crate::graph::Graph;
use crate::layer_selection::{
    rank_layers, select_top_k, DEFAULT_LATENT_LR, DEFAULT_RANKING_BATCH, DEFAULT_RANKING_ITERS,
};
use crate::losses::{directional_clip_loss, global_clip_loss};
use crate::tensor::Tensor;

pub const DEFAULT_BATCH_SIZE: usize = 2;
pub const DEFAULT_LEARNING_RATE: f64 = 0.002;
pub const DEFAULT_MIXING_PROB: f64 = 0.9;
pub const DEFAULT_SNAPSHOT_EVERY: usize = 50;
pub const DEFAULT_RESELECT_EVERY: usize = 1;
pub const DEFAULT_SOURCE_SAMPLES: usize = 16;

/// Truncation for snapshot grids. Training truncation comes from the config;
/// preview images always use this.
pub const SNAPSHOT_PSI: f64 = 0.7;
/// Codes per snapshot grid.
pub const GRID_CODES: usize = 16;
/// Tiles per grid row.
pub const GRID_COLS: usize = 4;

/// Decorrelates the grid-code stream from the training stream so adding an
/// iteration never changes which codes the previews show.
const GRID_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Which objective drives the weight updates. The directional form is the
/// product; the global form exists so degenerate behavior of the two can be
/// compared under identical training budgets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingObjective {
    #[default]
    Directional,
    Global,
}

/// Optional additions to the core objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraLosses {
    /// Directory of reference images. When set, the training direction comes
    /// from images instead of the text prompts.
    #[serde(default)]
    pub reference_dir: Option<PathBuf>,
    /// Generator samples drawn when estimating an image-pair direction.
    #[serde(default = "default_source_samples")]
    pub source_samples: usize,
}

impl Default for ExtraLosses {
    fn default() -> Self {
        ExtraLosses {
            reference_dir: None,
            source_samples: DEFAULT_SOURCE_SAMPLES,
        }
    }
}

fn default_source_samples() -> usize {
    DEFAULT_SOURCE_SAMPLES
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}

fn default_mixing_prob() -> f64 {
    DEFAULT_MIXING_PROB
}

fn default_truncation_psi() -> f64 {
    1.0
}

fn default_snapshot_every() -> usize {
    DEFAULT_SNAPSHOT_EVERY
}

fn default_reselect_every() -> usize {
    DEFAULT_RESELECT_EVERY
}

/// Everything a run needs beyond the source generator. Serializes as plain
/// JSON with these exact field names; unknown keys are rejected so a typo
/// cannot silently fall back to a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub source_text: String,
    pub target_text: String,
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_mixing_prob")]
    pub mixing_prob: f64,
    /// Train only the `k` highest-ranked layers, re-ranking every
    /// `reselect_every` iterations. `None` trains all synthesis layers.
    #[serde(default)]
    pub adaptive_k: Option<usize>,
    #[serde(default = "default_reselect_every")]
    pub reselect_every: usize,
    /// Embedding backend identifiers, resolved by
    /// [`crate::embedding::resolve_backend`].
    pub backends: Vec<String>,
    #[serde(default = "default_truncation_psi")]
    pub truncation_psi: f64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objective: TrainingObjective,
    #[serde(default)]
    pub extra_losses: ExtraLosses,
}

impl AdaptationConfig {
    /// Minimal config with defaults everywhere else.
    pub fn new(
        source_text: impl Into<String>,
        target_text: impl Into<String>,
        iterations: usize,
        backends: Vec<String>,
    ) -> Self {
        AdaptationConfig {
            source_text: source_text.into(),
            target_text: target_text.into(),
            iterations,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            mixing_prob: DEFAULT_MIXING_PROB,
            adaptive_k: None,
            reselect_every: DEFAULT_RESELECT_EVERY,
            backends,
            truncation_psi: 1.0,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            seed: 0,
            objective: TrainingObjective::Directional,
            extra_losses: ExtraLosses::default(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_text.is_empty() || self.target_text.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if self.source_text == self.target_text {
            return Err(Error::IdenticalPrompts);
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be finite and positive",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.mixing_prob) {
            return Err(Error::InvalidConfig(format!(
                "mixing_prob {} outside [0, 1]",
                self.mixing_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.truncation_psi) {
            return Err(Error::InvalidPsi(self.truncation_psi));
        }
        if self.adaptive_k == Some(0) {
            return Err(Error::InvalidK);
        }
        if self.reselect_every == 0 {
            return Err(Error::InvalidConfig(
                "reselect_every must be at least 1".into(),
            ));
        }
        if self.backends.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one embedding backend".into(),
            ));
        }
        if self.snapshot_every == 0 {
            return Err(Error::InvalidConfig(
                "snapshot_every must be at least 1".into(),
            ));
        }
        if self.extra_losses.source_samples == 0 {
            return Err(Error::InvalidConfig(
                "source_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Digest of the canonical JSON form, stamped into checkpoints so a run
    /// cannot resume under a silently edited config.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Named hyperparameter bundle selectable from the command line.
#[derive(Clone, Copy, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub source_text: &'static str,
    pub target_text: &'static str,
    pub iterations: usize,
    pub backends: &'static [&'static str],
    pub mixing_prob: f64,
    pub adaptive_k: usize,
}

const BOTH: &[&str] = &["vit-b-32", "vit-b-16"];
const B32: &[&str] = &["vit-b-32"];

pub const PRESETS: &[Preset] = &[
    Preset { name: "white-walker", source_text: "Human", target_text: "White Walker", iterations: 200, backends: BOTH, mixing_prob: 0.9, adaptive_k: 18 },
    Preset { name: "werewolf", source_text: "Human", target_text: "Werewolf", iterations: 300, backends: BOTH, mixing_prob: 0.9, adaptive_k: 12 },
    Preset { name: "elf", source_text: "Human", target_text: "Elf", iterations: 200, backends: BOTH, mixing_prob: 0.9, adaptive_k: 18 },
    Preset { name: "edvard-munch", source_text: "Photo", target_text: "Painting in the style of Edvard Munch", iterations: 300, backends: BOTH, mixing_prob: 0.9, adaptive_k: 18 },
    Preset { name: "sketch", source_text: "Photo", target_text: "Sketch", iterations: 300, backends: B32, mixing_prob: 0.0, adaptive_k: 18 },
    Preset { name: "pixar", source_text: "Photo", target_text: "3D render in the style of Pixar", iterations: 130, backends: BOTH, mixing_prob: 0.9, adaptive_k: 18 },
    Preset { name: "zombie", source_text: "Human", target_text: "Zombie", iterations: 150, backends: B32, mixing_prob: 0.9, adaptive_k: 18 },
    Preset { name: "cubism", source_text: "Photo", target_text: "Cubism painting", iterations: 300, backends: B32, mixing_prob: 0.0, adaptive_k: 18 },
    Preset { name: "princess", source_text: "Human", target_text: "Disney Princess", iterations: 200, backends: BOTH, mixing_prob: 0.9, adaptive_k: 18 },
    Preset { name: "modigliani", source_text: "Photo", target_text: "Amedeo Modigliani painting", iterations: 400, backends: BOTH, mixing_prob: 0.0, adaptive_k: 18 },
    Preset { name: "shire", source_text: "Church", target_text: "The Shire", iterations: 300, backends: B32, mixing_prob: 0.9, adaptive_k: 14 },
    Preset { name: "nicolas-cage", source_text: "Dog", target_text: "Nicolas Cage", iterations: 300, backends: B32, mixing_prob: 0.9, adaptive_k: 12 },
    Preset { name: "cat", source_text: "Dog", target_text: "Cat", iterations: 2000, backends: BOTH, mixing_prob: 0.0, adaptive_k: 3 },
    Preset { name: "bear", source_text: "Dog", target_text: "Bear", iterations: 2000, backends: BOTH, mixing_prob: 0.0, adaptive_k: 3 },
];

pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

impl From<&Preset> for AdaptationConfig {
    fn from(p: &Preset) -> Self {
        let mut config = AdaptationConfig::new(
            p.source_text,
            p.target_text,
            p.iterations,
            p.backends.iter().map(|s| s.to_string()).collect(),
        );
        config.mixing_prob = p.mixing_prob;
        config.adaptive_k = Some(p.adaptive_k);
        config
    }
}

/// Adam with moments and step counts keyed by parameter name. A parameter
/// frozen for some iterations keeps its moments and resumes where it left
/// off; nothing decays while it sits out.
#[derive(Clone, Debug)]
pub struct AdamState {
    lr: f64,
    steps: HashMap<String, u64>,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        assert!(lr.is_finite() && lr > 0.0, "learning rate must be positive");
        AdamState {
            lr,
            steps: HashMap::new(),
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Steps applied to `name` so far.
    pub fn step_count(&self, name: &str) -> u64 {
        self.steps.get(name).copied().unwrap_or(0)
    }

    /// One in-place update. A zero gradient on a parameter at rest (zero
    /// moments) leaves the value bit-identical.
    pub fn apply(&mut self, name: &str, value: &mut Tensor, grad: &Tensor) {
        assert_eq!(value.shape(), grad.shape(), "gradient shape mismatch");
        let n = value.len();
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
        let t = self.steps.entry(name.to_string()).or_insert(0);
        *t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
        let (md, vd, gd, xd) = (m.data_mut(), v.data_mut(), grad.data(), value.data_mut());
        for i in 0..n {
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            xd[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// One optimization step: synthesize the batch through both pair members,
/// evaluate the objective, and update every unfrozen trainable tensor.
/// Returns the pre-update loss. `iteration` only labels diagnostics.
///
/// A non-finite loss or gradient aborts before touching any weight, so the
/// pair still holds the last consistent state.
pub fn training_step(
    pair: &mut GeneratorPair,
    codes: &Tensor,
    directions: &[DirectionVector],
    backends: &[Box<dyn EmbeddingBackend>],
    opt: &mut AdamState,
    config: &AdaptationConfig,
    iteration: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let code_node = g.constant(codes.clone());
    let (frozen_img, _) = pair
        .frozen
        .forward_graph(&mut g, code_node, ForwardMode::Frozen)?;
    let (train_img, params) = pair
        .trainable
        .forward_graph(&mut g, code_node, ForwardMode::Trainable)?;
    let loss = match config.objective {
        TrainingObjective::Directional => {
            directional_clip_loss(&mut g, train_img, frozen_img, directions, backends)?
        }
        TrainingObjective::Global => {
            global_clip_loss(&mut g, train_img, &config.target_text, backends)?
        }
    };
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            last_snapshot: None,
        });
    }
    let grads = g.backward(loss);
    let mut updates = Vec::with_capacity(params.len());
    for (name, node) in &params {
        let grad = match grads.get(*node) {
            Some(t) => t.clone(),
            None => Tensor::zeros(g.shape(*node).to_vec()),
        };
        if !grad.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                last_snapshot: None,
            });
        }
        updates.push((name.clone(), grad));
    }
    for (name, grad) in updates {
        let value = pair
            .trainable
            .tensor_mut(&name)
            .expect("forward parameters map to registry names");
        opt.apply(&name, value, &grad);
    }
    Ok(loss_value)
}

/// Everything a finished run leaves behind, beyond the files on disk.
pub struct AdaptationRun {
    pub snapshots: Vec<CheckpointSnapshot>,
    /// Per-iteration loss values in order.
    pub losses: Vec<f64>,
    /// Untouched copy of the source, for before/after comparisons.
    pub frozen: StyleGenerator,
    /// The adapted generator, equal to the final checkpoint.
    pub trainable: StyleGenerator,
    /// Truncated codes behind every snapshot grid.
    pub eval_codes: Tensor,
}

/// Run an adaptation with backends resolved from the config identifiers.
pub fn adapt(
    source: &StyleGenerator,
    config: &AdaptationConfig,
    run_dir: &Path,
) -> Result<AdaptationRun> {
    config.validate()?;
    let backends = resolve_backends(&config.backends)?;
    adapt_with_backends(source, config, &backends, run_dir)
}

/// Same loop with caller-supplied backend instances, so tests and library
/// callers can inject mocks regardless of what the identifier list says.
pub fn adapt_with_backends(
    source: &StyleGenerator,
    config: &AdaptationConfig,
    backends: &[Box<dyn EmbeddingBackend>],
    run_dir: &Path,
) -> Result<AdaptationRun> {
    config.validate()?;
    let directions = text_directions(&config.source_text, &config.target_text, backends)?;
    run_adaptation(source, config, backends, &directions, run_dir)
}

/// Core loop shared by text-driven and image-driven adaptation; `directions`
/// is whatever the caller derived.
pub(crate) fn run_adaptation(
    source: &StyleGenerator,
    config: &AdaptationConfig,
    backends: &[Box<dyn EmbeddingBackend>],
    directions: &[DirectionVector],
    run_dir: &Path,
) -> Result<AdaptationRun> {
    config.validate()?;
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    fs::create_dir_all(run_dir.join("grids"))?;
    let mut log = BufWriter::new(fs::File::create(run_dir.join("run.log"))?);
    let hash = config.config_hash();

    let layers = source.num_layers();
    let w_dim = source.architecture().w_dim;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut grid_rng = ChaCha20Rng::seed_from_u64(config.seed ^ GRID_SEED_SALT);
    let eval_z = source.sample_z(GRID_CODES, &mut grid_rng);
    let eval_w = source.map_to_w(&eval_z, SNAPSHOT_PSI)?;
    let eval_codes = broadcast_w_batch(&eval_w, layers);

    let mut pair = clone_pair(source);
    let mut opt = AdamState::new(config.learning_rate);
    let mut snapshots: Vec<CheckpointSnapshot> = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut selected: Vec<usize> = (0..layers).collect();

    for iter in 0..config.iterations {
        if let Some(k) = config.adaptive_k {
            if iter % config.reselect_every == 0 {
                let ranking = rank_layers(
                    &pair.trainable,
                    &config.target_text,
                    DEFAULT_RANKING_BATCH,
                    DEFAULT_RANKING_ITERS,
                    DEFAULT_LATENT_LR,
                    backends,
                    &mut rng,
                )?;
                let picked = select_top_k(&ranking, k, &BTreeSet::new())?;
                selected = picked.iter().copied().collect();
                pair.trainable.set_trainable_layers(&selected)?;
            }
        }

        let z = pair.frozen.sample_z(2 * config.batch_size, &mut rng);
        let w = pair.frozen.map_to_w(&z, config.truncation_psi)?;
        let mut code_data = Vec::with_capacity(config.batch_size * layers * w_dim);
        for b in 0..config.batch_size {
            let w_a = Tensor::from_slice(w.row(b));
            let w_b = Tensor::from_slice(w.row(b + config.batch_size));
            let mixed = mixed_codes(&w_a, &w_b, config.mixing_prob, &mut rng, layers);
            code_data.extend_from_slice(mixed.data());
        }
        let codes = Tensor::new(vec![config.batch_size, layers, w_dim], code_data);

        let loss = training_step(&mut pair, &codes, directions, backends, &mut opt, config, iter)
            .map_err(|e| match e {
                Error::NonFiniteLoss { iteration, .. } => Error::NonFiniteLoss {
                    iteration,
                    last_snapshot: snapshots.last().map(|s| s.path.clone()),
                },
                other => other,
            })?;
        losses.push(loss);

        let layer_list = selected
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(log, "iter {iter:06} loss {loss:.6} layers {layer_list}")?;

        let step = iter + 1;
        if step % config.snapshot_every == 0 || step == config.iterations {
            snapshots.push(emit_snapshot(
                &pair.trainable,
                step as u64,
                &hash,
                &eval_codes,
                run_dir,
            )?);
        }
    }
    log.flush()?;

    Ok(AdaptationRun {
        snapshots,
        losses,
        frozen: pair.frozen,
        trainable: pair.trainable,
        eval_codes,
    })
}

fn emit_snapshot(
    gen: &StyleGenerator,
    iteration: u64,
    config_hash: &str,
    eval_codes: &Tensor,
    run_dir: &Path,
) -> Result<CheckpointSnapshot> {
    let ckpt_path = run_dir
        .join("checkpoints")
        .join(format!("iter_{iteration:06}.ckpt"));
    let mut snap = save_checkpoint(gen, iteration, config_hash, &ckpt_path)?;
    let grid_path = run_dir
        .join("grids")
        .join(format!("iter_{iteration:06}.png"));
    snapshot_grid(gen, eval_codes, &grid_path)?;
    snap.grid_path = Some(grid_path);
    Ok(snap)
}

pub(crate) fn quantize_channel(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Render `codes` (`[N, L, w_dim]`) through `generator` into a row-major
/// tile grid PNG. Tiles past the last code stay black. Output bytes are a
/// pure function of weights and codes.
pub fn snapshot_grid(generator: &StyleGenerator, codes: &Tensor, path: &Path) -> Result<()> {
    let shape = codes.shape();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::shape("[N >= 1, L, w_dim]", shape));
    }
    let images = generator.synthesize_batch(codes)?;
    let n = shape[0];
    let r = generator.resolution();
    let cols = GRID_COLS.min(n);
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * r, rows * r);
    let mut buf = vec![0u8; width * height * 3];
    for i in 0..n {
        let (tile_row, tile_col) = (i / cols, i % cols);
        for c in 0..3 {
            for y in 0..r {
                for x in 0..r {
                    let v = images.data()[((i * 3 + c) * r + y) * r + x];
                    let px = ((tile_row * r + y) * width + tile_col * r + x) * 3 + c;
                    buf[px] = quantize_channel(v);
                }
            }
        }
    }
    let img = image::RgbImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer length matches dimensions");
    img.save(path)?;
    Ok(())
}
