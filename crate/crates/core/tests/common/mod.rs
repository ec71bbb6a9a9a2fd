//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use boxlens::fixture;
use boxlens::hypercolumn::{HypercolumnMatrix, LayerOffset};
use boxlens::model::{ActivationVolume, LayerInfo, PredictionVector, Preprocessing};
use boxlens::{BlackBox, ClassifierModel, Image, Result};
use ndarray::Array2;
use rand::Rng;

/// Wraps a model and counts `predict` calls.
pub struct Counting<M> {
    pub inner: M,
    pub predicts: AtomicUsize,
}

impl<M> Counting<M> {
    pub fn new(inner: M) -> Self {
        Counting {
            inner,
            predicts: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.predicts.load(Ordering::SeqCst)
    }
}

impl<M: BlackBox> BlackBox for Counting<M> {
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }
    fn input_shape(&self) -> (usize, usize, usize) {
        self.inner.input_shape()
    }
    fn layer_catalog(&self) -> &[LayerInfo] {
        self.inner.layer_catalog()
    }
    fn predict(&self, image: &Image) -> Result<PredictionVector> {
        self.predicts.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(image)
    }
    fn activations(&self, image: &Image, layers: &[String]) -> Result<Vec<ActivationVolume>> {
        self.inner.activations(image, layers)
    }
    fn fingerprint(&self) -> Option<&str> {
        self.inner.fingerprint()
    }
}

pub fn tiny_preprocessing() -> Preprocessing {
    Preprocessing {
        scale: 1.0 / 255.0,
        ..Preprocessing::default()
    }
}

pub fn tiny_model() -> ClassifierModel {
    ClassifierModel::from_bytes(
        Path::new("tiny.onnx"),
        &fixture::tiny_cnn().to_onnx(),
        tiny_preprocessing(),
    )
    .unwrap()
}

pub fn random_image<R: Rng>(rng: &mut R, h: usize, w: usize, c: usize) -> Image {
    Image::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..255.0))
}

pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |_| rng.random_bool(0.4))
}

/// Mirror index with the edge sample repeated: for n = 3, -1 -> 0, -2 -> 1, 3 -> 2.
pub fn mirror(mut i: isize, n: isize) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Full 2-D Gaussian convolution with a `(2r+1)^2` window normalized as a whole.
pub fn dense_blur(image: &Image, sigma: f64, radius: usize) -> Image {
    let r = radius as isize;
    let (h, w) = (image.height() as isize, image.width() as isize);
    let mut weights = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            weights.push((dy, dx, (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let total: f64 = weights.iter().map(|w| w.2).sum();
    Image::from_fn(image.height(), image.width(), image.channels(), |y, x, c| {
        weights
            .iter()
            .map(|&(dy, dx, wt)| {
                wt * image.get(mirror(y as isize + dy, h), mirror(x as isize + dx, w), c)
            })
            .sum::<f64>()
            / total
    })
}

/// Dense blur inside the mask, original outside.
pub fn dense_masked_blur(image: &Image, mask: &Array2<bool>, sigma: f64, radius: usize) -> Image {
    let blurred = dense_blur(image, sigma, radius);
    Image::from_fn(image.height(), image.width(), image.channels(), |y, x, c| {
        if mask[[y, x]] {
            blurred.get(y, x, c)
        } else {
            image.get(y, x, c)
        }
    })
}

/// Weighted-average definition of IRP evaluated term by term.
pub fn brute_irp(weights: &[f64], ir: &[f64], true_class: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..weights.len() {
        num += weights[c] * ir[c];
        den += weights[c];
    }
    ir[true_class] / (num / den)
}

pub struct NaiveFit {
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub history: Vec<f64>,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Textbook Lloyd: nearest centroid (lowest index on ties), mean update, an
/// emptied centroid jumps to the row farthest from its assigned centroid.
pub fn naive_lloyd(rows: &[Vec<f64>], init: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> NaiveFit {
    let k = init.len();
    let d = rows[0].len();
    let mut centroids = init;
    let mut history = Vec::new();
    let assign = |cs: &Vec<Vec<f64>>| -> (Vec<usize>, Vec<f64>) {
        rows.iter()
            .map(|r| {
                let mut best = (0, sq(r, &cs[0]));
                for (j, c) in cs.iter().enumerate().skip(1) {
                    let dd = sq(r, c);
                    if dd < best.1 {
                        best = (j, dd);
                    }
                }
                best
            })
            .unzip()
    };
    for _ in 0..max_iter {
        let (labels, mut dist) = assign(&centroids);
        history.push(dist.iter().sum());
        let mut next = centroids.clone();
        for j in 0..k {
            let members: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(r, _)| r).collect();
            if members.is_empty() {
                let far = (0..rows.len()).fold(0, |f, i| if dist[i] > dist[f] { i } else { f });
                next[j] = rows[far].clone();
                dist[far] = f64::NEG_INFINITY;
            } else {
                let mut sum = vec![0.0; d];
                for m in &members {
                    for t in 0..d {
                        sum[t] += m[t];
                    }
                }
                next[j] = sum.iter().map(|s| s / members.len() as f64).collect();
            }
        }
        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift == 0.0 || shift < tol {
            break;
        }
    }
    let (_, dist) = assign(&centroids);
    let inertia = dist.iter().sum();
    history.push(inertia);
    NaiveFit {
        centroids,
        inertia,
        history,
    }
}

/// Lowest inertia over every labelling of `rows` into at most `k` groups.
pub fn brute_force_inertia(rows: &[Vec<f64>], k: usize) -> f64 {
    let n = rows.len();
    let mut best = f64::INFINITY;
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut labels = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            labels.push(c % k);
            c /= k;
        }
        let mut inertia = 0.0;
        for j in 0..k {
            let members: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(r, _)| r).collect();
            if members.is_empty() {
                continue;
            }
            let d = rows[0].len();
            let mean: Vec<f64> = (0..d)
                .map(|t| members.iter().map(|m| m[t]).sum::<f64>() / members.len() as f64)
                .collect();
            inertia += members.iter().map(|m| sq(m, &mean)).sum::<f64>();
        }
        best = best.min(inertia);
    }
    best
}

/// Sample matrix with rows laid out as a `1 x n` grid.
pub fn matrix(rows: &[Vec<f64>]) -> HypercolumnMatrix {
    let n = rows.len();
    let d = rows[0].len();
    HypercolumnMatrix {
        data: Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]),
        pixel_index: (0..n).map(|i| (0, i)).collect(),
        layer_offsets: vec![LayerOffset {
            layer_name: "synthetic".into(),
            start: 0,
            count: d,
        }],
        height: 1,
        width: n,
    }
}

/// Two well separated Gaussian-ish blobs; returns rows and true labels.
pub fn two_blobs<R: Rng>(rng: &mut R, per_blob: usize, dims: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for b in 0..2 {
        let centre = if b == 0 { 0.0 } else { 20.0 };
        for _ in 0..per_blob {
            rows.push((0..dims).map(|_| centre + rng.random_range(-1.0..1.0)).collect());
            labels.push(b);
        }
    }
    (rows, labels)
}

/// True when two labellings agree up to renaming clusters.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let n = a.len();
    (0..n).all(|i| (0..n).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}
