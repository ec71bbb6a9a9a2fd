//! Per-pixel hypercolumns: layer activations resampled to a common grid and
//! stacked along the channel axis.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ActivationVolume;

/// Channel range contributed by one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerOffset {
    pub layer_name: String,
    pub start: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypercolumnMatrix {
    /// One row per pixel, one column per stacked channel.
    pub data: Array2<f64>,
    /// Row -> (row px, col px) on the working grid.
    pub pixel_index: Vec<(usize, usize)>,
    pub layer_offsets: Vec<LayerOffset>,
    pub height: usize,
    pub width: usize,
}

impl HypercolumnMatrix {
    pub fn n_pixels(&self) -> usize {
        self.data.nrows()
    }

    pub fn total_channels(&self) -> usize {
        self.data.ncols()
    }

    /// True when every grid pixel appears exactly once, row-major.
    pub fn covers_grid(&self) -> bool {
        self.pixel_index.len() == self.height * self.width
            && self
                .pixel_index
                .iter()
                .enumerate()
                .all(|(r, &(y, x))| y * self.width + x == r)
    }

    /// Writes the matrix as little-endian `u64 n_pixels`, `u64 total_channels`,
    /// then `n_pixels * total_channels` row-major `f32` values.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
        write(&(self.n_pixels() as u64).to_le_bytes())?;
        write(&(self.total_channels() as u64).to_le_bytes())?;
        for v in self.data.iter() {
            write(&(*v as f32).to_le_bytes())?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Align-corners bilinear resampling of every channel to `target` (height, width).
pub fn upsample_volume(volume: &ActivationVolume, target: (usize, usize)) -> Result<ActivationVolume> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidInput(format!(
            "target size must be positive, got {th}x{tw}"
        )));
    }
    let (h, w, c) = volume.data.dim();
    if (h, w) == (th, tw) {
        return Ok(volume.clone());
    }
    let ys: Vec<(usize, usize, f64)> = (0..th).map(|i| source_coord(i, th, h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..tw).map(|j| source_coord(j, tw, w)).collect();
    let src = &volume.data;
    let mut out = Array3::<f64>::zeros((th, tw, c));
    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - fx) + src[[y0, x1, ch]] * fx;
                let bottom = src[[y1, x0, ch]] * (1.0 - fx) + src[[y1, x1, ch]] * fx;
                out[[i, j, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    ActivationVolume::new(volume.layer_name.clone(), out, volume.kind)
}

/// Maps output index `i` of `out` samples onto the `len`-sample source axis
/// with the end points aligned. Returns the two neighbours and the weight of
/// the second one.
fn source_coord(i: usize, out: usize, len: usize) -> (usize, usize, f64) {
    if out == 1 || len == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (len - 1) as f64 / (out - 1) as f64;
    let lo = (pos.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    (lo, hi, pos - lo as f64)
}

/// Upsamples each volume to `working_resolution` and concatenates channels in
/// input order. With `normalize`, every column is standardized to zero mean
/// and unit (population) variance; constant columns become all-zero.
pub fn build_hypercolumns(
    volumes: &[ActivationVolume],
    working_resolution: (usize, usize),
    normalize: bool,
) -> Result<HypercolumnMatrix> {
    if volumes.is_empty() {
        return Err(Error::InvalidInput(
            "at least one activation volume is required".into(),
        ));
    }
    let (height, width) = working_resolution;
    let upsampled = volumes
        .par_iter()
        .map(|v| upsample_volume(v, working_resolution))
        .collect::<Result<Vec<_>>>()?;

    let mut layer_offsets = Vec::with_capacity(volumes.len());
    let mut start = 0;
    for v in &upsampled {
        layer_offsets.push(LayerOffset {
            layer_name: v.layer_name.clone(),
            start,
            count: v.channels(),
        });
        start += v.channels();
    }

    let n = height * width;
    let mut data = Array2::<f64>::zeros((n, start));
    for (v, off) in upsampled.iter().zip(&layer_offsets) {
        let flat = v
            .data
            .view()
            .into_shape_with_order((n, off.count))
            .expect("standard layout volume");
        data.slice_mut(s![.., off.start..off.start + off.count])
            .assign(&flat);
    }
    if normalize {
        standardize_columns(&mut data);
    }

    let pixel_index = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .collect();
    Ok(HypercolumnMatrix {
        data,
        pixel_index,
        layer_offsets,
        height,
        width,
    })
}

fn standardize_columns(data: &mut Array2<f64>) {
    let n = data.nrows() as f64;
    data.axis_iter_mut(Axis(1))
        .into_par_iter()
        .for_each(|mut col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std <= 1e-12 * (1.0 + mean.abs()) {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - mean) / std);
            }
        });
}

/// Uniform sample of at most `max_rows` rows without replacement, kept in
/// original row order. Deterministic for a fixed seed.
pub fn subsample_rows(matrix: &HypercolumnMatrix, max_rows: usize, seed: u64) -> HypercolumnMatrix {
    let n = matrix.n_pixels();
    if n <= max_rows {
        return matrix.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, max_rows).into_vec();
    rows.sort_unstable();
    HypercolumnMatrix {
        data: matrix.data.select(Axis(0), &rows),
        pixel_index: rows.iter().map(|&r| matrix.pixel_index[r]).collect(),
        layer_offsets: matrix.layer_offsets.clone(),
        height: matrix.height,
        width: matrix.width,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;
    use ndarray::Array3;
    use rand::Rng;

    fn volume(name: &str, data: Array3<f64>) -> ActivationVolume {
        ActivationVolume::new(name, data, LayerKind::Convolutional).unwrap()
    }

    fn random_volume(name: &str, h: usize, w: usize, c: usize, seed: u64) -> ActivationVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        volume(name, Array3::from_shape_fn((h, w, c), |_| rng.random_range(-3.0..3.0)))
    }

    #[test]
    fn upsample_identity_at_target_size() {
        let v = random_volume("a", 3, 4, 2, 1);
        assert_eq!(upsample_volume(&v, (3, 4)).unwrap(), v);
    }

    #[test]
    fn upsample_broadcasts_single_pixel() {
        let v = volume("fc", Array3::from_shape_vec((1, 1, 3), vec![1.0, -2.0, 5.0]).unwrap());
        let up = upsample_volume(&v, (4, 6)).unwrap();
        assert_eq!(up.data.dim(), (4, 6, 3));
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(up.data[[y, x, 0]], 1.0);
                assert_eq!(up.data[[y, x, 1]], -2.0);
                assert_eq!(up.data[[y, x, 2]], 5.0);
            }
        }
    }

    #[test]
    fn upsample_2x2_to_4x4_matches_hand_bilinear() {
        // Source [[0,1],[2,3]]; align-corners puts target (i, j) at source
        // (i/3, j/3), so the value is 2*(i/3) + (j/3).
        let v = volume("a", Array3::from_shape_vec((2, 2, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let up = upsample_volume(&v, (4, 4)).unwrap();
        let expected = [
            [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            [2.0 / 3.0, 1.0, 4.0 / 3.0, 5.0 / 3.0],
            [4.0 / 3.0, 5.0 / 3.0, 2.0, 7.0 / 3.0],
            [2.0, 7.0 / 3.0, 8.0 / 3.0, 3.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((up.data[[i, j, 0]] - expected[i][j]).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn upsample_rejects_zero_target() {
        let v = random_volume("a", 2, 2, 1, 0);
        assert!(upsample_volume(&v, (0, 3)).is_err());
    }

    #[test]
    fn concatenation_offsets() {
        let a = random_volume("L1", 2, 2, 2, 1);
        let b = random_volume("L2", 1, 1, 3, 2);
        let m = build_hypercolumns(&[a, b], (4, 4), false).unwrap();
        assert_eq!(m.total_channels(), 5);
        assert_eq!(m.n_pixels(), 16);
        assert!(m.covers_grid());
        let offs: Vec<_> = m
            .layer_offsets
            .iter()
            .map(|o| (o.layer_name.as_str(), o.start, o.count))
            .collect();
        assert_eq!(offs, vec![("L1", 0, 2), ("L2", 2, 3)]);
    }

    #[test]
    fn identity_path_rows_are_pixel_fibres() {
        let v = random_volume("a", 3, 5, 4, 9);
        let m = build_hypercolumns(std::slice::from_ref(&v), (3, 5), false).unwrap();
        for (r, &(y, x)) in m.pixel_index.iter().enumerate() {
            for c in 0..4 {
                assert_eq!(m.data[[r, c]], v.data[[y, x, c]]);
            }
        }
    }

    #[test]
    fn rows_match_upsampled_layers() {
        let vols = [
            random_volume("a", 2, 3, 2, 3),
            random_volume("b", 4, 4, 3, 4),
            random_volume("c", 1, 2, 1, 5),
        ];
        let res = (5, 6);
        let m = build_hypercolumns(&vols, res, false).unwrap();
        for (v, off) in vols.iter().zip(&m.layer_offsets) {
            let up = upsample_volume(v, res).unwrap();
            for (r, &(y, x)) in m.pixel_index.iter().enumerate() {
                for c in 0..off.count {
                    assert_eq!(m.data[[r, off.start + c]], up.data[[y, x, c]]);
                }
            }
        }
    }

    #[test]
    fn standardization_zero_mean_unit_variance() {
        let mut data = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| (y * 7 + x * 3 + c) as f64 * 100.0);
        // constant channel
        data.slice_mut(s![.., .., 1]).fill(4.2);
        let m = build_hypercolumns(&[volume("a", data)], (6, 5), true).unwrap();
        let n = m.n_pixels() as f64;
        for (c, col) in m.data.axis_iter(Axis(1)).enumerate() {
            if c == 1 {
                assert!(col.iter().all(|&v| v == 0.0));
                continue;
            }
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn channel_permutation_is_equivariant() {
        let v = random_volume("a", 3, 3, 4, 11);
        let perm = [2usize, 0, 3, 1];
        let permuted = volume("a", Array3::from_shape_fn((3, 3, 4), |(y, x, c)| v.data[[y, x, perm[c]]]));
        for normalize in [false, true] {
            let m = build_hypercolumns(std::slice::from_ref(&v), (5, 4), normalize).unwrap();
            let p = build_hypercolumns(std::slice::from_ref(&permuted), (5, 4), normalize).unwrap();
            for r in 0..m.n_pixels() {
                for c in 0..4 {
                    assert_eq!(p.data[[r, c]], m.data[[r, perm[c]]]);
                }
            }
        }
    }

    #[test]
    fn empty_volume_list_is_an_error() {
        assert!(build_hypercolumns(&[], (2, 2), true).is_err());
    }

    fn random_matrix(n_side: usize, channels: usize) -> HypercolumnMatrix {
        build_hypercolumns(&[random_volume("a", n_side, n_side, channels, 17)], (n_side, n_side), false)
            .unwrap()
    }

    #[test]
    fn subsample_noop_when_small() {
        let m = random_matrix(10, 3);
        assert_eq!(subsample_rows(&m, 1000, 5), m);
    }

    #[test]
    fn subsample_is_deterministic_and_distinct() {
        let m = random_matrix(40, 2); // 1600 rows
        let a = subsample_rows(&m, 100, 7);
        let b = subsample_rows(&m, 100, 7);
        assert_eq!(a, b);
        assert_eq!(a.n_pixels(), 100);
        let mut idx = a.pixel_index.clone();
        idx.dedup();
        assert_eq!(idx.len(), 100);
        for (r, &(y, x)) in a.pixel_index.iter().enumerate() {
            assert_eq!(a.data.row(r), m.data.row(y * 40 + x));
        }
        let c = subsample_rows(&m, 100, 8);
        assert_ne!(a.pixel_index, c.pixel_index);
    }

    #[test]
    fn binary_dump_layout() {
        let m = random_matrix(2, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hc.bin");
        m.write_binary(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 4 * 3);
        assert_eq!(u64::from_le_bytes(bytes[0..8].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        let v = f32::from_le_bytes(bytes[16 + 4 * 4..16 + 5 * 4].try_into().unwrap());
        assert_eq!(v, m.data[[1, 1]] as f32);
    }
}
