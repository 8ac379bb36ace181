//! Command-line front end. See [`run`].

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::analysis::{
    self, diversity_score, embed_corpus, pca_project, render_scatter, DEFAULT_DIVERSITY_CLUSTERS,
};
use crate::embedding::{resolve_backend, resolve_backends};
use crate::error::{Error, Result};
use crate::fewshot::{
    self, discriminator_catchup, load_discriminator, load_image_dir, load_labeled_image_dir,
    save_discriminator, CatchupConfig, Discriminator,
};
use crate::generator::{
    broadcast_w_batch, interpolate_weights, load_checkpoint, StyleGenerator,
};
use crate::layer_selection::{rank_layers, select_top_k};
use crate::mapper::{load_mapper, save_mapper, train_mapper, MapperConfig};
use crate::tensor::Tensor;
use crate::trainer::{self, snapshot_grid, AdaptationConfig};

/// Entry point for the `nada` binary. Returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for runtime failures.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> u8 {
    let argv = std::iter::once("nada".to_string()).chain(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

#[derive(Parser)]
#[command(
    name = "nada",
    version,
    about = "Text-guided domain adaptation for style-based image generators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the starting generator comes from.
#[derive(Args)]
struct GeneratorSource {
    /// Generator checkpoint to start from; omit for a fresh toy generator.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Weight-init seed for the fresh toy generator.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

impl GeneratorSource {
    fn load(&self) -> Result<StyleGenerator> {
        match &self.generator {
            Some(path) => Ok(load_checkpoint(path)?.0),
            None => Ok(StyleGenerator::toy(self.init_seed)),
        }
    }
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigOrPreset {
    /// Named preset supplying prompts and hyperparameters.
    #[arg(long)]
    preset: Option<String>,
    /// JSON adaptation config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigOrPreset {
    fn resolve(&self) -> Result<AdaptationConfig> {
        match (&self.preset, &self.config) {
            (Some(name), None) => Ok(trainer::preset(name)?.into()),
            (None, Some(path)) => AdaptationConfig::from_json_file(path),
            _ => unreachable!("clap enforces exactly one"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DiversityMetric {
    /// L2 distance between raw pixel tensors.
    Pixel,
    /// L2 distance between backend embeddings.
    Embedding,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt a generator toward a text-described target domain.
    Adapt {
        #[command(flatten)]
        config: ConfigOrPreset,
        #[command(flatten)]
        source: GeneratorSource,
        /// Run directory for checkpoints, grids, and the loss log.
        #[arg(long)]
        out_dir: PathBuf,
        /// Validate and print the resolved config without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Adapt a generator toward a directory of reference images.
    FewshotAdapt {
        /// Directory of reference images (PNG or JPEG).
        #[arg(long)]
        images: PathBuf,
        /// JSON adaptation config file.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        source: GeneratorSource,
        #[arg(long)]
        out_dir: PathBuf,
        /// Validate the config and image directory without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train a latent mapper toward a target prompt, generator untouched.
    MapTrain {
        /// Target domain prompt.
        #[arg(long)]
        target: String,
        /// JSON mapper config file.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        source: GeneratorSource,
        /// Directory receiving `mapper.ckpt`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a sample grid from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of samples in the grid.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Truncation strength in [0, 1].
        #[arg(long, default_value_t = 0.7)]
        psi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend two checkpoints and render a grid per blend step.
    Interpolate {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        /// Number of frames, endpoints included.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0.7)]
        psi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving `frame_###.png`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score synthesis layers by how far a short latent probe moves them.
    RankLayers {
        #[command(flatten)]
        source: GeneratorSource,
        /// Target prompt the probe optimizes toward.
        #[arg(long)]
        target: String,
        /// Embedding backend identifier (repeatable).
        #[arg(long = "backend", required = true)]
        backends: Vec<String>,
        /// Latent codes scored per probe.
        #[arg(long, default_value_t = 8)]
        codes: usize,
        /// Optimization steps per probe.
        #[arg(long, default_value_t = 1)]
        opt_steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also print the top-k selection.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Embed images and texts, project to 2D, and plot.
    EmbedAnalyze {
        /// Directory of images; file stems become row labels.
        #[arg(long)]
        images: PathBuf,
        /// Text to embed alongside the images (repeatable).
        #[arg(long = "text")]
        texts: Vec<String>,
        /// Embedding backend identifier.
        #[arg(long)]
        backend: String,
        /// Directory receiving `table.txt` and `scatter.png`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cluster images and report mean intra-cluster perceptual distance.
    Diversity {
        #[arg(long)]
        images: PathBuf,
        /// Cluster count.
        #[arg(long, default_value_t = DEFAULT_DIVERSITY_CLUSTERS)]
        k: usize,
        #[arg(long, value_enum, default_value_t = DiversityMetric::Pixel)]
        metric: DiversityMetric,
        /// Backend identifier; required for the embedding metric.
        #[arg(long)]
        backend: Option<String>,
        /// Image side length for the pixel metric.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train only a discriminator against a frozen generator's samples.
    Catchup {
        #[command(flatten)]
        source: GeneratorSource,
        /// Directory of real reference images.
        #[arg(long)]
        images: PathBuf,
        /// Existing discriminator archive to continue from.
        #[arg(long)]
        disc: Option<PathBuf>,
        /// Hidden width for a fresh discriminator.
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        /// Weight-init seed for a fresh discriminator.
        #[arg(long, default_value_t = 0)]
        disc_seed: u64,
        /// JSON catch-up config file; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory receiving `discriminator.ckpt`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a deterministic sample set plus manifest.
    ExportSamples {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        /// Truncation strength; must stay 1 when a mapper is applied.
        #[arg(long, default_value_t = 1.0)]
        psi: f64,
        /// Latent mapper archive to apply to every code.
        #[arg(long)]
        mapper: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Adapt {
            config,
            source,
            out_dir,
            dry_run,
        } => {
            let resolved = config.resolve()?;
            resolved.validate()?;
            if dry_run {
                println!("{}", serde_json::to_string_pretty(&resolved)?);
                return Ok(());
            }
            let generator = source.load()?;
            let run = trainer::adapt(&generator, &resolved, &out_dir)?;
            print_run_summary(&run, &out_dir);
            Ok(())
        }
        Command::FewshotAdapt {
            images,
            config,
            source,
            out_dir,
            dry_run,
        } => {
            let resolved = AdaptationConfig::from_json_file(&config)?;
            resolved.validate()?;
            let generator = source.load()?;
            let reals = load_image_dir(&images, generator.resolution())?;
            if dry_run {
                println!("{}", serde_json::to_string_pretty(&resolved)?);
                println!("reference images: {}", reals.len());
                return Ok(());
            }
            let run = fewshot::adapt_with_images(&generator, &reals, &resolved, &out_dir)?;
            print_run_summary(&run, &out_dir);
            Ok(())
        }
        Command::MapTrain {
            target,
            config,
            source,
            out_dir,
        } => {
            let resolved = MapperConfig::from_json_file(&config)?;
            resolved.validate()?;
            let generator = source.load()?;
            let mapper = train_mapper(&generator, &target, &resolved)?;
            fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("mapper.ckpt");
            save_mapper(&mapper, &path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Sample {
            ckpt,
            n,
            psi,
            seed,
            out,
        } => {
            let (generator, _) = load_checkpoint(&ckpt)?;
            render_grid(&generator, n, psi, seed, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Interpolate {
            ckpt_a,
            ckpt_b,
            steps,
            n,
            psi,
            seed,
            out_dir,
        } => {
            if steps < 2 {
                return Err(Error::InvalidConfig(format!(
                    "interpolation needs at least 2 steps, got {steps}"
                )));
            }
            let (a, _) = load_checkpoint(&ckpt_a)?;
            let (b, _) = load_checkpoint(&ckpt_b)?;
            fs::create_dir_all(&out_dir)?;
            for i in 0..steps {
                let t = i as f64 / (steps - 1) as f64;
                let blended = interpolate_weights(&a, &b, t)?;
                render_grid(&blended, n, psi, seed, &out_dir.join(format!("frame_{i:03}.png")))?;
            }
            println!("wrote {steps} frames to {}", out_dir.display());
            Ok(())
        }
        Command::RankLayers {
            source,
            target,
            backends,
            codes,
            opt_steps,
            lr,
            seed,
            k,
        } => {
            let generator = source.load()?;
            let resolved = resolve_backends(&backends)?;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let ranking = rank_layers(&generator, &target, codes, opt_steps, lr, &resolved, &mut rng)?;
            for (layer, score) in ranking.scores().iter().enumerate() {
                println!("layer {layer:2} score {score:.6}");
            }
            if let Some(k) = k {
                let selected = select_top_k(&ranking, k, &BTreeSet::new())?;
                let list: Vec<String> = selected.iter().map(|l| l.to_string()).collect();
                println!("selected {}", list.join(","));
            }
            Ok(())
        }
        Command::EmbedAnalyze {
            images,
            texts,
            backend,
            out_dir,
        } => {
            let backend = resolve_backend(&backend)?;
            let labeled = load_labeled_image_dir(&images, backend.input_resolution())?;
            let rows = embed_corpus(&labeled, &texts, backend.as_ref())?;
            let embeddings: Vec<Tensor> = rows.iter().map(|r| r.embedding.clone()).collect();
            let pca = pca_project(&embeddings, 2)?;
            fs::create_dir_all(&out_dir)?;
            let mut table = String::from("label\tkind\tx\ty\n");
            for (i, row) in rows.iter().enumerate() {
                let kind = match row.kind {
                    analysis::RowKind::Image => "image",
                    analysis::RowKind::Text => "text",
                };
                table.push_str(&format!(
                    "{}\t{}\t{:.6}\t{:.6}\n",
                    row.label,
                    kind,
                    pca.projected.data()[2 * i],
                    pca.projected.data()[2 * i + 1],
                ));
            }
            print!("{table}");
            fs::write(out_dir.join("table.txt"), &table)?;
            render_scatter(&rows, &pca.projected, &out_dir.join("scatter.png"))?;
            println!("wrote table.txt and scatter.png to {}", out_dir.display());
            Ok(())
        }
        Command::Diversity {
            images,
            k,
            metric,
            backend,
            resolution,
            seed,
        } => {
            let l2 = |a: &Tensor, b: &Tensor| a.sub(b).l2_norm();
            let report = match metric {
                DiversityMetric::Pixel => {
                    let imgs = load_image_dir(&images, resolution)?;
                    diversity_score(&imgs, k, l2, seed)?
                }
                DiversityMetric::Embedding => {
                    let id = backend.ok_or_else(|| {
                        Error::InvalidConfig(
                            "the embedding metric needs --backend".into(),
                        )
                    })?;
                    let backend = resolve_backend(&id)?;
                    let imgs = load_image_dir(&images, backend.input_resolution())?;
                    let embeddings: Vec<Tensor> = imgs
                        .iter()
                        .map(|img| backend.embed_image(img))
                        .collect::<Result<_>>()?;
                    diversity_score(&embeddings, k, l2, seed)?
                }
            };
            println!("diversity {:.6}", report.score);
            for (i, cluster) in report.clusters.iter().enumerate() {
                println!(
                    "cluster {i}: medoid {} size {} pairs {} mean {:.6}",
                    cluster.medoid,
                    cluster.members.len(),
                    cluster.pair_count,
                    cluster.mean_pairwise,
                );
            }
            if report.all_singletons {
                eprintln!("warning: every cluster is a singleton; the score carries no signal");
            }
            Ok(())
        }
        Command::Catchup {
            source,
            images,
            disc,
            hidden,
            disc_seed,
            config,
            out_dir,
        } => {
            let generator = source.load()?;
            let reals = load_image_dir(&images, generator.resolution())?;
            let discriminator = match disc {
                Some(path) => load_discriminator(&path)?,
                None => Discriminator::new(generator.resolution(), hidden, disc_seed),
            };
            let resolved = match config {
                Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
                None => CatchupConfig::default(),
            };
            let trained = discriminator_catchup(&generator, discriminator, &reals, &resolved)?;
            fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("discriminator.ckpt");
            save_discriminator(&trained, &path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::ExportSamples {
            ckpt,
            n,
            psi,
            mapper,
            seed,
            out_dir,
        } => {
            let (generator, _) = load_checkpoint(&ckpt)?;
            let manifest = match mapper {
                Some(path) => {
                    if psi != 1.0 {
                        return Err(Error::InvalidConfig(
                            "a mapper export always samples at psi = 1; drop --psi".into(),
                        ));
                    }
                    let mapper = load_mapper(&path)?;
                    fewshot::synthesize_finetune_set(&generator, Some(&mapper), n, &out_dir, seed)?
                }
                None => fewshot::export_samples(&generator, n, psi, &out_dir, seed)?,
            };
            println!("wrote {} images to {}", manifest.count, out_dir.display());
            Ok(())
        }
    }
}

fn print_run_summary(run: &crate::trainer::AdaptationRun, out_dir: &Path) {
    if let Some(last) = run.losses.last() {
        println!(
            "finished {} iterations, final loss {last:.6}",
            run.losses.len()
        );
    }
    println!(
        "{} checkpoints under {}",
        run.snapshots.len(),
        out_dir.display()
    );
}

/// Shared sampling path for `sample` and `interpolate`: draw `n` codes from
/// `seed` through the generator's own mapping and render one tile grid.
fn render_grid(
    generator: &StyleGenerator,
    n: usize,
    psi: f64,
    seed: u64,
    path: &Path,
) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z = generator.sample_z(n, &mut rng);
    let w = generator.map_to_w(&z, psi)?;
    let codes = broadcast_w_batch(&w, generator.num_layers());
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    snapshot_grid(generator, &codes, path)
}
