//! Embedding-space analysis: corpus tables, PCA projection, K-Medoids
//! clustering, diversity scoring, weight-interpolation sweeps, and a
//! collapse indicator comparing adapted output spread against the source.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::embedding::EmbeddingBackend;
use crate::error::{Error, Result};
use crate::generator::{interpolate_weights, StyleGenerator};
use crate::tensor::Tensor;

/// Cluster count for diversity scoring when the caller has no opinion.
pub const DEFAULT_DIVERSITY_CLUSTERS: usize = 10;

/// Eigenvalues at or below `max_variance * RANK_EPS` count as numerically
/// zero when flagging rank deficiency.
const RANK_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Image,
    Text,
}

/// One embedded corpus entry; `embedding` is exactly what the backend's
/// direct `embed_image` / `embed_text` call would return.
#[derive(Clone, Debug)]
pub struct CorpusRow {
    pub label: String,
    pub kind: RowKind,
    pub embedding: Tensor,
}

/// Embed labeled images and raw texts into one table for joint analysis.
pub fn embed_corpus(
    images: &[(String, Tensor)],
    texts: &[String],
    backend: &dyn EmbeddingBackend,
) -> Result<Vec<CorpusRow>> {
    if images.is_empty() && texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rows = Vec::with_capacity(images.len() + texts.len());
    for (label, image) in images {
        rows.push(CorpusRow {
            label: label.clone(),
            kind: RowKind::Image,
            embedding: backend.embed_image(image)?,
        });
    }
    for text in texts {
        rows.push(CorpusRow {
            label: text.clone(),
            kind: RowKind::Text,
            embedding: backend.embed_text(text)?,
        });
    }
    Ok(rows)
}

/// Mean-centered projection onto the top principal components.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// `[n, k]` coordinates of each input row in the component basis.
    pub projected: Tensor,
    /// `[k, d]`; rows are orthonormal component directions.
    pub basis: Tensor,
    /// Per-component variance, non-increasing.
    pub variances: Vec<f64>,
    /// True where the component carries no variance (rank deficiency); the
    /// direction is still orthonormal but arbitrary within the null space.
    pub degenerate: Vec<bool>,
}

pub fn pca_project(embeddings: &[Tensor], n_components: usize) -> Result<PcaProjection> {
    if n_components < 1 {
        return Err(Error::InvalidConfig(
            "n_components must be at least 1".into(),
        ));
    }
    let n = embeddings.len();
    if n < n_components {
        return Err(Error::TooFewPoints {
            need: n_components,
            got: n,
        });
    }
    let d = embeddings[0].len();
    for e in embeddings {
        e.expect_shape(&[d])?;
    }

    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, &v) in mean.iter_mut().zip(e.data()) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.data().iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();

    // Sample covariance; a single row has none by definition.
    let mut cov = vec![0.0; d * d];
    if n > 1 {
        for row in &centered {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += row[i] * row[j] / (n - 1) as f64;
                }
            }
        }
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));

    let max_var = eigenvalues[order[0]].max(0.0);
    let mut basis = Vec::with_capacity(n_components * d);
    let mut variances = Vec::with_capacity(n_components);
    let mut degenerate = Vec::with_capacity(n_components);
    for &col in order.iter().take(n_components) {
        let mut component: Vec<f64> = (0..d).map(|r| eigenvectors[r * d + col]).collect();
        // Deterministic sign: largest-magnitude entry points positive.
        let lead = component
            .iter()
            .cloned()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            for v in &mut component {
                *v = -*v;
            }
        }
        let lambda = eigenvalues[col].max(0.0);
        degenerate.push(lambda <= max_var * RANK_EPS);
        variances.push(lambda);
        basis.extend_from_slice(&component);
    }

    let mut projected = Vec::with_capacity(n * n_components);
    for row in &centered {
        for c in 0..n_components {
            projected.push(
                row.iter()
                    .zip(&basis[c * d..(c + 1) * d])
                    .map(|(&x, &b)| x * b)
                    .sum(),
            );
        }
    }
    Ok(PcaProjection {
        projected: Tensor::new(vec![n, n_components], projected),
        basis: Tensor::new(vec![n_components, d], basis),
        variances,
        degenerate,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and a row-major matrix whose column `j` is eigenvector `j`.
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    if d < 2 {
        return ((0..d).map(|i| a[i * d + i]).collect(), v);
    }
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                s += a[p * d + q] * a[p * d + q];
            }
        }
        s.sqrt()
    };
    let scale: f64 = (0..d)
        .map(|i| a[i * d + i].abs())
        .fold(off(&a), f64::max)
        .max(1e-300);
    for _sweep in 0..100 {
        if off(&a) <= scale * 1e-15 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= scale * 1e-18 {
                    continue;
                }
                let tau = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// A K-Medoids partition; medoids are indices into the input list.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub medoids: Vec<usize>,
    /// Cluster index (position in `medoids`) for every input point.
    pub assignments: Vec<usize>,
    /// Total distance from each point to its assigned medoid.
    pub cost: f64,
}

/// PAM clustering: greedy build (candidate scan order drawn from `seed`),
/// then best-improvement swaps until no swap lowers the cost.
pub fn kmedoids<F>(points: &[Tensor], k: usize, distance: F, seed: u64) -> Result<Clustering>
where
    F: Fn(&Tensor, &Tensor) -> f64,
{
    let dist = distance_matrix(points, &distance);
    Ok(kmedoids_from_matrix(&dist, points.len(), k, seed)?.0)
}

fn distance_matrix<F>(points: &[Tensor], distance: &F) -> Vec<f64>
where
    F: Fn(&Tensor, &Tensor) -> f64,
{
    let n = points.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = distance(&points[i], &points[j]);
        }
    }
    dist
}

/// Core PAM over a precomputed `[n, n]` dissimilarity matrix (row = point,
/// column = candidate medoid). Also returns the cost after build and after
/// each applied swap, for monotonicity checks.
fn kmedoids_from_matrix(
    dist: &[f64],
    n: usize,
    k: usize,
    seed: u64,
) -> Result<(Clustering, Vec<f64>)> {
    if k < 1 {
        return Err(Error::InvalidK);
    }
    if n < k {
        return Err(Error::TooFewPoints { need: k, got: n });
    }
    let mut scan: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    scan.shuffle(&mut rng);

    // Greedy build: each step adds the candidate with the largest cost
    // reduction; ties go to the earliest candidate in the shuffled order.
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for &c in &scan {
            if medoids.contains(&c) {
                continue;
            }
            let total: f64 = (0..n)
                .map(|j| dist[j * n + c].min(nearest[j]))
                .sum();
            if best.is_none_or(|(_, b)| total < b) {
                best = Some((c, total));
            }
        }
        let (chosen, _) = best.expect("k <= n leaves a candidate");
        medoids.push(chosen);
        for j in 0..n {
            nearest[j] = nearest[j].min(dist[j * n + chosen]);
        }
    }

    let cost_of = |medoids: &[usize]| -> f64 {
        (0..n)
            .map(|j| {
                medoids
                    .iter()
                    .map(|&m| dist[j * n + m])
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };

    let mut cost = cost_of(&medoids);
    let mut trace = vec![cost];
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for mi in 0..k {
            for &h in &scan {
                if medoids.contains(&h) {
                    continue;
                }
                let mut candidate = medoids.clone();
                candidate[mi] = h;
                let c = cost_of(&candidate);
                if c < cost && best.is_none_or(|(_, _, b)| c < b) {
                    best = Some((mi, h, c));
                }
            }
        }
        match best {
            Some((mi, h, c)) => {
                medoids[mi] = h;
                cost = c;
                trace.push(cost);
            }
            None => break,
        }
    }

    let assignments: Vec<usize> = (0..n)
        .map(|j| {
            (0..k)
                .min_by(|&a, &b| dist[j * n + medoids[a]].total_cmp(&dist[j * n + medoids[b]]))
                .expect("k >= 1")
        })
        .collect();
    Ok((
        Clustering {
            medoids,
            assignments,
            cost,
        },
        trace,
    ))
}

#[derive(Clone, Debug)]
pub struct ClusterDiversity {
    pub medoid: usize,
    pub members: Vec<usize>,
    pub pair_count: usize,
    /// Mean pairwise distance inside the cluster; 0 for singletons.
    pub mean_pairwise: f64,
}

#[derive(Clone, Debug)]
pub struct DiversityReport {
    /// Mean perceptual distance over all intra-cluster pairs.
    pub score: f64,
    pub clusters: Vec<ClusterDiversity>,
    /// Every cluster is a singleton: the score is 0 by definition and says
    /// nothing about the images. Callers should warn.
    pub all_singletons: bool,
}

/// Cluster the images, then average the perceptual distance over all
/// intra-cluster pairs (pooled across clusters, so larger clusters weigh
/// in proportion to their pair count). `k` is clamped to the image count.
pub fn diversity_score<F>(
    images: &[Tensor],
    k: usize,
    perceptual: F,
    seed: u64,
) -> Result<DiversityReport>
where
    F: Fn(&Tensor, &Tensor) -> f64,
{
    let n = images.len();
    if n < 2 {
        return Err(Error::TooFewPoints { need: 2, got: n });
    }
    if k < 1 {
        return Err(Error::InvalidK);
    }
    let dist = distance_matrix(images, &perceptual);
    let (clustering, _) = kmedoids_from_matrix(&dist, n, k.min(n), seed)?;

    let k_eff = clustering.medoids.len();
    let mut clusters = Vec::with_capacity(k_eff);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for ci in 0..k_eff {
        let members: Vec<usize> = (0..n)
            .filter(|&j| clustering.assignments[j] == ci)
            .collect();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += dist[i * n + j];
                count += 1;
            }
        }
        total += sum;
        pairs += count;
        clusters.push(ClusterDiversity {
            medoid: clustering.medoids[ci],
            members,
            pair_count: count,
            mean_pairwise: if count > 0 { sum / count as f64 } else { 0.0 },
        });
    }
    Ok(DiversityReport {
        score: if pairs > 0 { total / pairs as f64 } else { 0.0 },
        clusters,
        all_singletons: pairs == 0,
    })
}

/// Render the same code through a family of weight blends from `a` (t = 0)
/// to `b` (t = 1), evenly spaced. Endpoint frames use the untouched input
/// generators.
pub fn interpolation_sweep(
    a: &StyleGenerator,
    b: &StyleGenerator,
    code: &Tensor,
    steps: usize,
) -> Result<Vec<Tensor>> {
    if steps < 2 {
        return Err(Error::InvalidConfig(format!(
            "sweep needs at least 2 steps, got {steps}"
        )));
    }
    (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            interpolate_weights(a, b, t)?.synthesize(code)
        })
        .collect()
}

/// How tightly the adapted outputs have drawn together, relative to the
/// source outputs for the same codes. 0 means total collapse, 1 means the
/// spread of the source is preserved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseReport {
    /// Mean pairwise embedding distance among adapted-generator images.
    pub target_spread: f64,
    /// Mean pairwise embedding distance among source-generator images.
    pub source_spread: f64,
    /// `target_spread / source_spread`.
    pub indicator: f64,
}

pub fn collapse_report(
    train_images: &[Tensor],
    frozen_images: &[Tensor],
    backend: &dyn EmbeddingBackend,
) -> Result<CollapseReport> {
    if train_images.len() != frozen_images.len() {
        return Err(Error::BatchMismatch {
            a: train_images.len(),
            b: frozen_images.len(),
        });
    }
    if train_images.len() < 2 {
        return Err(Error::TooFewPoints {
            need: 2,
            got: train_images.len(),
        });
    }
    let spread = |images: &[Tensor]| -> Result<f64> {
        let embeddings: Vec<Tensor> = images
            .iter()
            .map(|img| backend.embed_image(img))
            .collect::<Result<_>>()?;
        let n = embeddings.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                sum += embeddings[i].sub(&embeddings[j]).l2_norm();
            }
        }
        Ok(sum / (n * (n - 1) / 2) as f64)
    };
    let target_spread = spread(train_images)?;
    let source_spread = spread(frozen_images)?;
    if source_spread <= 0.0 {
        return Err(Error::DegenerateSourceBatch);
    }
    Ok(CollapseReport {
        target_spread,
        source_spread,
        indicator: target_spread / source_spread,
    })
}

/// Scatter plot of a 2-component projection: images as filled blue squares,
/// texts as red. Written as a PNG.
pub fn render_scatter(rows: &[CorpusRow], projected: &Tensor, path: &Path) -> Result<()> {
    projected.expect_shape(&[rows.len(), 2])?;
    const SIDE: u32 = 512;
    const MARGIN: f64 = 32.0;
    let xs: Vec<f64> = (0..rows.len()).map(|i| projected.data()[2 * i]).collect();
    let ys: Vec<f64> = (0..rows.len()).map(|i| projected.data()[2 * i + 1]).collect();
    let range = |v: &[f64]| -> (f64, f64) {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-12 {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x_lo, x_hi) = range(&xs);
    let (y_lo, y_hi) = range(&ys);
    let span = f64::from(SIDE) - 2.0 * MARGIN;
    let mut img = image::RgbImage::from_pixel(SIDE, SIDE, image::Rgb([255, 255, 255]));
    for (row, (&x, &y)) in rows.iter().zip(xs.iter().zip(&ys)) {
        let px = MARGIN + (x - x_lo) / (x_hi - x_lo) * span;
        let py = MARGIN + (y_hi - y) / (y_hi - y_lo) * span;
        let color = match row.kind {
            RowKind::Image => image::Rgb([40, 90, 200]),
            RowKind::Text => image::Rgb([200, 60, 40]),
        };
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let cx = px as i32 + dx;
                let cy = py as i32 + dy;
                if (0..SIDE as i32).contains(&cx) && (0..SIDE as i32).contains(&cy) {
                    img.put_pixel(cx as u32, cy as u32, color);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::MockBackend;
    use crate::generator::{broadcast_w_batch, Architecture};

    fn l2(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).l2_norm()
    }

    fn point(x: f64, y: f64) -> Tensor {
        Tensor::from_slice(&[x, y])
    }

    #[test]
    fn corpus_rows_match_direct_embedding_calls() {
        let mut backend = MockBackend::new(3, 4, 8);
        backend.register_text("a photo", &[1.0, 0.0, 0.0, 0.0]).unwrap();
        backend.register_text("a painting", &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let images: Vec<(String, Tensor)> = (0..10)
            .map(|i| {
                let data: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
                (format!("img-{i}"), Tensor::new(vec![3, 8, 8], data))
            })
            .collect();
        let texts = vec!["a photo".to_string(), "a painting".to_string()];
        let rows = embed_corpus(&images, &texts, &backend).unwrap();
        assert_eq!(rows.len(), 12);
        for (row, (label, image)) in rows.iter().zip(&images) {
            assert_eq!(row.kind, RowKind::Image);
            assert_eq!(&row.label, label);
            assert_eq!(row.embedding, backend.embed_image(image).unwrap());
        }
        for (row, text) in rows[10..].iter().zip(&texts) {
            assert_eq!(row.kind, RowKind::Text);
            assert_eq!(&row.label, text);
            assert_eq!(row.embedding, backend.embed_text(text).unwrap());
        }
        assert!(matches!(
            embed_corpus(&[], &[], &backend),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn collinear_points_put_all_variance_on_the_first_component() {
        let dir = [1.0, 2.0, 3.0];
        let points: Vec<Tensor> = [-2.0, -0.5, 0.25, 1.0, 3.0]
            .iter()
            .map(|&t| Tensor::from_slice(&[t * dir[0], t * dir[1], t * dir[2]]))
            .collect();
        let pca = pca_project(&points, 3).unwrap();
        let total: f64 = pca.variances.iter().sum();
        assert!(pca.variances[0] / total > 0.9999);
        assert!(pca.degenerate[1] && pca.degenerate[2]);
        assert!(!pca.degenerate[0]);
        // The leading direction is the line itself.
        let norm = (14.0f64).sqrt();
        for c in 0..3 {
            assert!((pca.basis.data()[c].abs() - dir[c] / norm).abs() < 1e-10);
        }
        // Mean-centering sends the centroid to the origin, so projected
        // coordinates average to zero per component.
        for c in 0..3 {
            let mean: f64 = (0..5).map(|i| pca.projected.data()[i * 3 + c]).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn pca_basis_is_orthonormal_and_eigen_residuals_vanish() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let d = 6;
        let points: Vec<Tensor> = (0..100)
            .map(|_| {
                Tensor::new(
                    vec![d],
                    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                )
            })
            .collect();
        let pca = pca_project(&points, d).unwrap();
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d)
                    .map(|c| pca.basis.data()[i * d + c] * pca.basis.data()[j * d + c])
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-8, "basis[{i}]·basis[{j}] = {dot}");
            }
        }
        for w in pca.variances.windows(2) {
            assert!(w[0] >= w[1], "variances must be non-increasing");
        }
        // Independent check without a second eigensolver: each component
        // must be an eigenvector of the sample covariance with its reported
        // variance as eigenvalue, and the projected coordinates must carry
        // exactly that variance.
        let n = points.len();
        let mut mean = vec![0.0; d];
        for p in &points {
            for (m, &v) in mean.iter_mut().zip(p.data()) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for p in &points {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] +=
                        (p.data()[i] - mean[i]) * (p.data()[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        for c in 0..d {
            let v = &pca.basis.data()[c * d..(c + 1) * d];
            for i in 0..d {
                let cv: f64 = (0..d).map(|j| cov[i * d + j] * v[j]).sum();
                assert!(
                    (cv - pca.variances[c] * v[i]).abs() < 1e-8,
                    "component {c} is not an eigenvector (row {i})"
                );
            }
            let proj_var: f64 = (0..n)
                .map(|r| pca.projected.data()[r * d + c].powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            assert!((proj_var - pca.variances[c]).abs() < 1e-8);
        }
    }

    #[test]
    fn pca_agrees_with_an_independent_eigensolver() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let d = 5;
        let n = 100;
        let points: Vec<Tensor> = (0..n)
            .map(|_| {
                Tensor::new(
                    vec![d],
                    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let pca = pca_project(&points, d).unwrap();

        let mut mean = vec![0.0; d];
        for p in &points {
            for (m, &v) in mean.iter_mut().zip(p.data()) {
                *m += v / n as f64;
            }
        }
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for p in &points {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] +=
                        (p.data()[i] - mean[i]) * (p.data()[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        let eigen = nalgebra::SymmetricEigen::new(cov);
        let mut reference: Vec<(f64, Vec<f64>)> = (0..d)
            .map(|c| {
                (
                    eigen.eigenvalues[c],
                    (0..d).map(|r| eigen.eigenvectors[(r, c)]).collect(),
                )
            })
            .collect();
        reference.sort_by(|a, b| b.0.total_cmp(&a.0));

        for c in 0..d {
            assert!(
                (pca.variances[c] - reference[c].0).abs() < 1e-8,
                "variance {c}: {} vs {}",
                pca.variances[c],
                reference[c].0
            );
            // Eigenvectors are defined up to sign.
            let dot: f64 = (0..d)
                .map(|i| pca.basis.data()[c * d + i] * reference[c].1[i])
                .sum();
            assert!(
                (dot.abs() - 1.0).abs() < 1e-8,
                "component {c} direction mismatch, |dot| = {}",
                dot.abs()
            );
        }
    }

    #[test]
    fn rank_deficient_input_flags_the_empty_components() {
        // Four points spanning only the xy-plane of 3-space.
        let points = vec![
            Tensor::from_slice(&[0.0, 0.0, 5.0]),
            Tensor::from_slice(&[1.0, 0.2, 5.0]),
            Tensor::from_slice(&[0.3, 1.1, 5.0]),
            Tensor::from_slice(&[-0.7, 0.4, 5.0]),
        ];
        let pca = pca_project(&points, 3).unwrap();
        assert_eq!(pca.degenerate, vec![false, false, true]);
        assert!(pca.variances[2].abs() < 1e-12);

        assert!(matches!(
            pca_project(&points, 5),
            Err(Error::TooFewPoints { need: 5, got: 4 })
        ));
        assert!(matches!(
            pca_project(&points, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn kmedoids_trivial_cases() {
        let points: Vec<Tensor> = (0..4).map(|i| point(i as f64 * 3.0, 0.0)).collect();
        // k = n: every point is its own medoid at zero cost.
        let all = kmedoids(&points, 4, l2, 0).unwrap();
        let mut sorted = all.medoids.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(all.cost, 0.0);
        for (j, &ci) in all.assignments.iter().enumerate() {
            assert_eq!(all.medoids[ci], j);
        }

        // Two far-apart 2-point clusters resolve one medoid each.
        let pairs = vec![
            point(0.0, 0.0),
            point(0.0, 1.0),
            point(100.0, 0.0),
            point(100.0, 1.0),
        ];
        let two = kmedoids(&pairs, 2, l2, 7).unwrap();
        let sides: Vec<bool> = two.medoids.iter().map(|&m| m >= 2).collect();
        assert_ne!(sides[0], sides[1], "one medoid per cluster");
        assert_eq!(two.assignments[0], two.assignments[1]);
        assert_eq!(two.assignments[2], two.assignments[3]);
        assert_ne!(two.assignments[0], two.assignments[2]);
        assert!((two.cost - 2.0).abs() < 1e-12);

        assert!(matches!(kmedoids(&pairs, 0, l2, 0), Err(Error::InvalidK)));
        assert!(matches!(
            kmedoids(&pairs, 5, l2, 0),
            Err(Error::TooFewPoints { need: 5, got: 4 })
        ));

        // Duplicate points are fine.
        let dupes = vec![point(1.0, 1.0); 5];
        let dup = kmedoids(&dupes, 2, l2, 3).unwrap();
        assert_eq!(dup.cost, 0.0);
    }

    #[test]
    fn kmedoids_matches_the_exhaustive_optimum_on_small_instances() {
        fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
            let mut out = Vec::new();
            let mut current = Vec::new();
            fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
                if cur.len() == k {
                    out.push(cur.clone());
                    return;
                }
                for i in start..n {
                    cur.push(i);
                    rec(i + 1, n, k, cur, out);
                    cur.pop();
                }
            }
            rec(0, n, k, &mut current, &mut out);
            out
        }

        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for trial in 0..40 {
            let n = rng.random_range(3..=8);
            let k = rng.random_range(1..=3.min(n));
            let points: Vec<Tensor> = (0..n)
                .map(|_| point(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                .collect();
            let pam = kmedoids(&points, k, l2, trial).unwrap();
            let optimal = subsets(n, k)
                .iter()
                .map(|s| {
                    points
                        .iter()
                        .map(|p| s.iter().map(|&m| l2(p, &points[m])).fold(f64::INFINITY, f64::min))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(
                pam.cost <= optimal + 1e-9,
                "trial {trial}: n={n} k={k} pam cost {} vs optimal {} (gap {})",
                pam.cost,
                optimal,
                pam.cost - optimal
            );
        }
    }

    #[test]
    fn kmedoids_swap_costs_never_increase_and_runs_are_seed_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let points: Vec<Tensor> = (0..12)
            .map(|_| point(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let dist = distance_matrix(&points, &l2);
        let (a, trace) = kmedoids_from_matrix(&dist, 12, 3, 17).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "swap increased cost: {trace:?}");
        }
        let (b, _) = kmedoids_from_matrix(&dist, 12, 3, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diversity_trivial_values() {
        // Identical images cluster at distance 0.
        let same = vec![point(2.0, 2.0); 6];
        let report = diversity_score(&same, 2, l2, 0).unwrap();
        assert_eq!(report.score, 0.0);
        assert!(!report.all_singletons);

        // Two copies of each of three distinct images, three clusters: each
        // cluster holds one identical pair.
        let mut doubled = Vec::new();
        for i in 0..3 {
            let p = point(i as f64 * 50.0, 0.0);
            doubled.push(p.clone());
            doubled.push(p);
        }
        let report = diversity_score(&doubled, 3, l2, 1).unwrap();
        assert_eq!(report.score, 0.0);
        assert!(!report.all_singletons);
        for c in &report.clusters {
            assert_eq!(c.members.len(), 2);
            assert_eq!(c.pair_count, 1);
        }

        // Well-separated singletons: score defined as 0, flagged.
        let spread = vec![point(0.0, 0.0), point(50.0, 0.0), point(0.0, 50.0)];
        let report = diversity_score(&spread, 10, l2, 2).unwrap();
        assert_eq!(report.score, 0.0);
        assert!(report.all_singletons);

        assert!(matches!(
            diversity_score(&spread[..1], 2, l2, 0),
            Err(Error::TooFewPoints { need: 2, got: 1 })
        ));
        assert!(matches!(
            diversity_score(&spread, 0, l2, 0),
            Err(Error::InvalidK)
        ));
    }

    #[test]
    fn diversity_matches_a_hand_computed_instance() {
        // Two obvious groups; distances inside each are hand-checkable.
        let images = vec![
            point(0.0, 0.0),
            point(1.0, 0.0),
            point(0.0, 1.0),
            point(10.0, 10.0),
            point(11.0, 10.0),
            point(10.0, 11.0),
        ];
        let report = diversity_score(&images, 2, l2, 4).unwrap();
        // Each group: pairs (1, 1, √2), mean over all six pairs.
        let expected = (4.0 + 2.0 * std::f64::consts::SQRT_2) / 6.0;
        assert!((report.score - expected).abs() < 1e-12);
        assert_eq!(report.clusters.len(), 2);
        for c in &report.clusters {
            assert_eq!(c.pair_count, 3);
            let mean = (2.0 + std::f64::consts::SQRT_2) / 3.0;
            assert!((c.mean_pairwise - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_is_permutation_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        // Two tight, well-separated blobs make the optimal partition unique.
        let mut images: Vec<Tensor> = (0..4)
            .map(|_| point(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        images.extend((0..4).map(|_| {
            point(
                rng.random_range(19.5..20.5),
                rng.random_range(19.5..20.5),
            )
        }));
        let base = diversity_score(&images, 2, l2, 0).unwrap().score;
        for seed in [1u64, 2, 3] {
            let mut shuffled = images.clone();
            shuffled.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
            let score = diversity_score(&shuffled, 2, l2, 0).unwrap().score;
            assert!(
                (score - base).abs() < 1e-12,
                "permutation changed the score: {base} vs {score}"
            );
        }
    }

    fn tiny_gen(seed: u64) -> StyleGenerator {
        StyleGenerator::with_architecture(
            Architecture {
                z_dim: 8,
                w_dim: 8,
                base_resolution: 4,
                channels: vec![4, 4],
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn sweep_endpoints_bit_match_direct_synthesis() {
        let a = tiny_gen(1);
        let b = tiny_gen(2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let z = a.sample_z(1, &mut rng);
        let w = a.map_to_w(&z, 1.0).unwrap();
        let codes = broadcast_w_batch(&w, a.num_layers());
        let code = Tensor::new(
            vec![a.num_layers(), 8],
            codes.data().to_vec(),
        );
        let frames = interpolation_sweep(&a, &b, &code, 5).unwrap();
        assert_eq!(frames.len(), 5);
        assert_eq!(frames[0], a.synthesize(&code).unwrap());
        assert_eq!(frames[4], b.synthesize(&code).unwrap());

        let same = interpolation_sweep(&a, &a, &code, 4).unwrap();
        for f in &same[1..] {
            assert_eq!(*f, same[0]);
        }

        assert!(matches!(
            interpolation_sweep(&a, &b, &code, 1),
            Err(Error::InvalidConfig(_))
        ));
        let other = StyleGenerator::with_architecture(
            Architecture {
                z_dim: 8,
                w_dim: 8,
                base_resolution: 4,
                channels: vec![4, 4, 4],
            },
            9,
        )
        .unwrap();
        assert!(matches!(
            interpolation_sweep(&a, &other, &code, 3),
            Err(Error::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn sweep_midpoint_matches_an_independently_blended_generator() {
        let a = tiny_gen(4);
        let b = tiny_gen(5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let z = a.sample_z(1, &mut rng);
        let w = a.map_to_w(&z, 1.0).unwrap();
        let code = Tensor::new(
            vec![a.num_layers(), 8],
            broadcast_w_batch(&w, a.num_layers()).data().to_vec(),
        );
        let frames = interpolation_sweep(&a, &b, &code, 3).unwrap();

        // Blend through the checkpoint path: average the stored arrays of
        // both generators and load the result as its own model.
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.ckpt");
        let path_b = dir.path().join("b.ckpt");
        crate::generator::save_checkpoint(&a, 0, "x", &path_a).unwrap();
        crate::generator::save_checkpoint(&b, 0, "x", &path_b).unwrap();
        let (manifest, arrays_a) = crate::container::read_archive(&path_a).unwrap();
        let (_, arrays_b) = crate::container::read_archive(&path_b).unwrap();
        let blended: Vec<(String, Tensor)> = arrays_a
            .into_iter()
            .zip(arrays_b)
            .map(|((name, ta), (name_b, tb))| {
                assert_eq!(name, name_b);
                let data: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| (x + y) / 2.0)
                    .collect();
                (name, Tensor::new(ta.shape().to_vec(), data))
            })
            .collect();
        let path_m = dir.path().join("m.ckpt");
        crate::container::write_archive(&path_m, &manifest, &blended).unwrap();
        let (mid, _) = crate::generator::load_checkpoint(&path_m).unwrap();
        let direct = mid.synthesize(&code).unwrap();
        let diff: f64 = frames[1]
            .data()
            .iter()
            .zip(direct.data())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "midpoint deviates from direct blend by {diff}");
    }

    #[test]
    fn collapse_indicator_tracks_constructed_spreads() {
        let backend = MockBackend::mean_rgb(4);
        let solid = |r: f64, g: f64, b: f64| {
            let mut data = vec![0.0; 3 * 16];
            data[..16].fill(r);
            data[16..32].fill(g);
            data[32..].fill(b);
            Tensor::new(vec![3, 4, 4], data)
        };
        let sources = vec![
            solid(0.9, 0.1, 0.1),
            solid(0.1, 0.9, 0.1),
            solid(0.1, 0.1, 0.9),
            solid(0.6, 0.6, 0.1),
        ];

        // Fully collapsed adapted batch: indicator 0.
        let collapsed = vec![solid(0.8, 0.2, 0.2); 4];
        let collapsed_report = collapse_report(&collapsed, &sources, &backend).unwrap();
        assert!(collapsed_report.target_spread.abs() < 1e-12);
        assert_eq!(collapsed_report.indicator, 0.0);

        // Unchanged outputs: indicator exactly 1.
        let identity_report = collapse_report(&sources, &sources, &backend).unwrap();
        assert!((identity_report.indicator - 1.0).abs() < 1e-12);

        // A color shift keeps the batch spread out, so its indicator beats
        // the collapsed one.
        let shifted: Vec<Tensor> = sources
            .iter()
            .map(|img| {
                let mut out = img.clone();
                for v in &mut out.data_mut()[..16] {
                    *v = (*v + 0.1).min(1.0);
                }
                out
            })
            .collect();
        let shifted_report = collapse_report(&shifted, &sources, &backend).unwrap();
        assert!(collapsed_report.indicator < shifted_report.indicator);
        assert!(shifted_report.indicator > 0.5);

        assert!(matches!(
            collapse_report(&sources[..2], &sources, &backend),
            Err(Error::BatchMismatch { a: 2, b: 4 })
        ));
        assert!(matches!(
            collapse_report(&sources[..1], &sources[..1], &backend),
            Err(Error::TooFewPoints { need: 2, got: 1 })
        ));
        let flat = vec![solid(0.5, 0.5, 0.5); 3];
        assert!(matches!(
            collapse_report(&sources[..3], &flat, &backend),
            Err(Error::DegenerateSourceBatch)
        ));
    }

    #[test]
    fn scatter_rendering_writes_a_plot() {
        let mut backend = MockBackend::new(2, 3, 4);
        backend.register_text("anchor", &[0.0, 0.0, 1.0]).unwrap();
        let images: Vec<(String, Tensor)> = (0..3)
            .map(|i| {
                (
                    format!("s{i}"),
                    Tensor::full(vec![3, 4, 4], 0.2 + 0.3 * i as f64),
                )
            })
            .collect();
        let rows = embed_corpus(&images, &["anchor".to_string()], &backend).unwrap();
        let embeddings: Vec<Tensor> = rows.iter().map(|r| r.embedding.clone()).collect();
        let pca = pca_project(&embeddings, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.png");
        render_scatter(&rows, &pca.projected, &path).unwrap();
        let decoded = image::open(&path).unwrap().to_rgb8();
        assert_eq!(decoded.dimensions(), (512, 512));
        // Both marker colors must appear.
        let mut has_blue = false;
        let mut has_red = false;
        for px in decoded.pixels() {
            has_blue |= px.0 == [40, 90, 200];
            has_red |= px.0 == [200, 60, 40];
        }
        assert!(has_blue && has_red);
    }
}
