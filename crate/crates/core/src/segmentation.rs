//! Interpretable features: k-means over hypercolumns, then per-cluster pixel masks.
//!
//! Fitting may run on a row subsample; labels are then assigned on the full
//! matrix. All reductions are done over fixed-size row chunks combined in
//! chunk order, so results do not depend on the rayon thread count.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercolumn::HypercolumnMatrix;
use crate::perturbation::FeatureMask;

const CHUNK_ROWS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Lloyd stops once no centroid moves by this much (Euclidean).
    pub tolerance: f64,
    pub seed: u64,
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 10,
            max_iterations: 300,
            tolerance: 1e-4,
            seed: 0,
            n_init: 1,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::Config(format!(
                "tolerance must be non-negative, got {}",
                self.tolerance
            )));
        }
        if self.n_init == 0 {
            return Err(Error::Config("n_init must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Lloyd iterations performed.
    pub iterations: usize,
    pub converged: bool,
    /// Inertia after every assignment step, ending with the final centroids.
    pub inertia_history: Vec<f64>,
}

/// Pixel labelling produced by nearest-centroid assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSegmentation {
    /// `(height, width)` grid of labels in `0..k`.
    pub label_map: Array2<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub k: usize,
}

impl FeatureSegmentation {
    pub fn height(&self) -> usize {
        self.label_map.nrows()
    }

    pub fn width(&self) -> usize {
        self.label_map.ncols()
    }

    /// Nearest-neighbour resampling of the label map.
    pub fn resized(&self, height: usize, width: usize) -> FeatureSegmentation {
        let (h, w) = self.label_map.dim();
        if (h, w) == (height, width) {
            return self.clone();
        }
        let label_map =
            Array2::from_shape_fn((height, width), |(y, x)| {
                self.label_map[[y * h / height, x * w / width]]
            });
        FeatureSegmentation {
            label_map,
            ..self.clone()
        }
    }

    pub fn pixel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in self.label_map.iter() {
            counts[l] += 1;
        }
        counts
    }
}

#[inline]
fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest centroid; ties go to the lower index.
fn closest(row: ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.axis_iter(Axis(0)).enumerate() {
        let d = squared_distance(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest-centroid label and squared distance for every row.
pub fn nearest_centroids(data: ArrayView2<f64>, centroids: ArrayView2<f64>) -> (Vec<usize>, Vec<f64>) {
    data.axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| closest(row, centroids))
        .unzip()
}

fn ordered_sum(values: &[f64]) -> f64 {
    values
        .par_chunks(CHUNK_ROWS)
        .map(|chunk| chunk.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// k-means++ seeding: the first centre uniformly at random, each further one
/// with probability proportional to the squared distance to the nearest
/// centre chosen so far.
pub fn kmeans_plus_plus<R: Rng>(data: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = data.nrows();
    assert!(k >= 1 && k <= n, "k-means++ needs 1 <= k <= n");
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = data
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| squared_distance(row, data.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total = ordered_sum(&d2);
        let next = if total > 0.0 && total.is_finite() {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        let centre = data.row(next);
        d2.par_iter_mut()
            .zip(data.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(d, row)| *d = d.min(squared_distance(row, centre)));
    }
    data.select(Axis(0), &chosen)
}

/// Lloyd iterations from the given initial centroids.
///
/// Each step assigns rows to their nearest centroid, then moves every centroid
/// to the mean of its rows. A centroid left without rows is moved onto the row
/// farthest from its own centroid. Stops when no centroid moves by
/// `config.tolerance` or more (or moves at all, for a zero tolerance), or after
/// `config.max_iterations` steps.
pub fn lloyd(data: ArrayView2<f64>, init: Array2<f64>, config: &KMeansConfig) -> KMeansFit {
    let (n, d) = data.dim();
    let k = init.nrows();
    let mut centroids = init;
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iterations {
        let (labels, mut dist) = nearest_centroids(data, centroids.view());
        let inertia = ordered_sum(&dist);
        if let Some(&prev) = history.last() {
            debug_assert!(
                inertia <= prev + 1e-9 * prev.max(1.0),
                "inertia increased: {prev} -> {inertia}"
            );
        }
        history.push(inertia);
        iterations += 1;

        let partials: Vec<(Array2<f64>, Vec<usize>)> = data
            .axis_chunks_iter(Axis(0), CHUNK_ROWS)
            .into_par_iter()
            .zip(labels.par_chunks(CHUNK_ROWS))
            .map(|(rows, labs)| {
                let mut sums = Array2::<f64>::zeros((k, d));
                let mut counts = vec![0usize; k];
                for (row, &l) in rows.axis_iter(Axis(0)).zip(labs) {
                    let mut target = sums.row_mut(l);
                    target += &row;
                    counts[l] += 1;
                }
                (sums, counts)
            })
            .collect();
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (s, c) in partials {
            sums += &s;
            counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }

        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                next.row_mut(j).assign(&mean);
            } else {
                let mut far = 0;
                for i in 1..n {
                    if dist[i] > dist[far] {
                        far = i;
                    }
                }
                next.row_mut(j).assign(&data.row(far));
                dist[far] = f64::NEG_INFINITY;
            }
        }

        let shift = next
            .axis_iter(Axis(0))
            .zip(centroids.axis_iter(Axis(0)))
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift == 0.0 || shift < config.tolerance {
            converged = true;
            break;
        }
    }

    let (_, dist) = nearest_centroids(data, centroids.view());
    let inertia = ordered_sum(&dist);
    history.push(inertia);
    KMeansFit {
        centroids,
        inertia,
        iterations,
        converged,
        inertia_history: history,
    }
}

/// k-means with k-means++ seeding; deterministic for fixed rows and config.
pub fn kmeans_fit(rows: &HypercolumnMatrix, config: &KMeansConfig) -> Result<KMeansFit> {
    config.validate()?;
    let data = rows.data.view();
    if data.nrows() < config.k {
        return Err(Error::InvalidInput(format!(
            "{} rows cannot form {} clusters",
            data.nrows(),
            config.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..config.n_init {
        let init = kmeans_plus_plus(data, config.k, &mut rng);
        let fit = lloyd(data, init, config);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// Labels every pixel of a full-grid matrix with its nearest centroid.
pub fn assign_labels(matrix: &HypercolumnMatrix, centroids: &Array2<f64>) -> Result<FeatureSegmentation> {
    if centroids.ncols() != matrix.total_channels() {
        return Err(Error::ShapeMismatch(format!(
            "centroids have {} dimensions, hypercolumns have {}",
            centroids.ncols(),
            matrix.total_channels()
        )));
    }
    if centroids.nrows() == 0 {
        return Err(Error::InvalidInput("no centroids given".into()));
    }
    if !matrix.covers_grid() {
        return Err(Error::InvalidInput(
            "label assignment needs a hypercolumn row for every pixel".into(),
        ));
    }
    let (labels, dist) = nearest_centroids(matrix.data.view(), centroids.view());
    let mut label_map = Array2::<usize>::zeros((matrix.height, matrix.width));
    for (&(y, x), &l) in matrix.pixel_index.iter().zip(&labels) {
        label_map[[y, x]] = l;
    }
    Ok(FeatureSegmentation {
        label_map,
        centroids: centroids.clone(),
        inertia: ordered_sum(&dist),
        k: centroids.nrows(),
    })
}

/// One mask per label in `0..k`, including empty ones.
pub fn extract_masks(segmentation: &FeatureSegmentation) -> Vec<FeatureMask> {
    (0..segmentation.k)
        .map(|id| FeatureMask::new(id, segmentation.label_map.mapv(|l| l == id)))
        .collect()
}

/// Checks that `masks` are pairwise disjoint and jointly cover a `height x width` grid.
pub fn verify_partition(masks: &[FeatureMask], height: usize, width: usize) -> Result<()> {
    let mut cover = Array2::<u32>::zeros((height, width));
    for m in masks {
        if m.pixels.dim() != (height, width) {
            return Err(Error::Partition(format!(
                "mask {} is {:?}, grid is {height}x{width}",
                m.feature_id,
                m.pixels.dim()
            )));
        }
        cover.zip_mut_with(&m.pixels, |c, &p| *c += u32::from(p));
    }
    if let Some(((y, x), &c)) = cover.indexed_iter().find(|(_, &c)| c != 1) {
        return Err(Error::Partition(format!(
            "pixel ({y}, {x}) is covered by {c} masks"
        )));
    }
    let total: usize = masks.iter().map(|m| m.pixel_count).sum();
    if total != height * width {
        return Err(Error::Partition(format!(
            "mask pixel counts sum to {total}, grid has {}",
            height * width
        )));
    }
    Ok(())
}
