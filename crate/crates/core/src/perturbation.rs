//! Blur perturbation of individual features.
//!
//! The whole image is blurred once; each feature's perturbed variant takes the
//! blurred samples inside its mask and the original samples everywhere else.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMask {
    pub feature_id: usize,
    /// `(height, width)` membership grid.
    pub pixels: Array2<bool>,
    pub pixel_count: usize,
    pub empty: bool,
}

impl FeatureMask {
    pub fn new(feature_id: usize, pixels: Array2<bool>) -> Self {
        let pixel_count = pixels.iter().filter(|&&p| p).count();
        FeatureMask {
            feature_id,
            pixels,
            pixel_count,
            empty: pixel_count == 0,
        }
    }
}

/// Edge handling for the convolution. `Reflect` mirrors about the outer pixel
/// edge, repeating the border sample (`c b a | a b c | c b a`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgePolicy {
    #[default]
    Reflect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurConfig {
    /// Standard deviation in pixels.
    pub sigma: f64,
    /// Half-width of the sampled kernel.
    pub kernel_radius: usize,
    #[serde(default)]
    pub edge_policy: EdgePolicy,
}

/// Sigma used for a 224-pixel image side; other sizes scale linearly.
pub const REFERENCE_SIGMA: f64 = 10.0;
pub const REFERENCE_SIDE: f64 = 224.0;

impl BlurConfig {
    /// Kernel radius defaults to `ceil(3 * sigma)`, at least 1.
    pub fn with_sigma(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
        }
        Ok(BlurConfig {
            sigma,
            kernel_radius: ((3.0 * sigma).ceil() as usize).max(1),
            edge_policy: EdgePolicy::Reflect,
        })
    }

    /// Default strength for an image of the given size.
    pub fn for_resolution(height: usize, width: usize) -> Self {
        let sigma = REFERENCE_SIGMA * height.min(width) as f64 / REFERENCE_SIDE;
        Self::with_sigma(sigma).expect("positive image size gives positive sigma")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("blur sigma must be positive, got {}", self.sigma)));
        }
        if self.kernel_radius == 0 {
            return Err(Error::Config("kernel radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sampled Gaussian of length `2 * radius + 1`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur of every channel.
pub fn gaussian_blur(image: &Image, config: &BlurConfig) -> Result<Image> {
    config.validate()?;
    let kernel = gaussian_kernel(config.sigma, config.kernel_radius);
    let r = config.kernel_radius as isize;
    let (h, w, c) = (image.height(), image.width(), image.channels());

    let mut horizontal = Image::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + t as isize - r, w);
                    acc += kv * image.get(y, sx, ch);
                }
                horizontal.set(y, x, ch, acc);
            }
        }
    }
    let mut out = Image::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - r, h);
                    acc += kv * horizontal.get(sy, x, ch);
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    Ok(out)
}

/// `blurred` inside the mask, `original` outside.
pub fn composite(original: &Image, blurred: &Image, mask: &FeatureMask) -> Result<Image> {
    let (h, w) = (original.height(), original.width());
    if (blurred.height(), blurred.width(), blurred.channels())
        != (h, w, original.channels())
    {
        return Err(Error::ShapeMismatch("blurred image differs in shape".into()));
    }
    if mask.pixels.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask is {:?}, image is {h}x{w}",
            mask.pixels.dim()
        )));
    }
    let mut out = original.clone();
    for ((y, x), &inside) in mask.pixels.indexed_iter() {
        if inside {
            for ch in 0..original.channels() {
                out.set(y, x, ch, blurred.get(y, x, ch));
            }
        }
    }
    Ok(out)
}

/// Blurs the image and keeps the result only where `mask` is set.
pub fn apply_masked_blur(image: &Image, mask: &FeatureMask, config: &BlurConfig) -> Result<Image> {
    if mask.pixels.dim() != (image.height(), image.width()) {
        return Err(Error::ShapeMismatch(format!(
            "mask is {:?}, image is {}x{}",
            mask.pixels.dim(),
            image.height(),
            image.width()
        )));
    }
    if mask.empty {
        return Ok(image.clone());
    }
    let blurred = gaussian_blur(image, config)?;
    composite(image, &blurred, mask)
}
