//! Transparency report: the JSON document plus the colored influence overlay.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::influence::{FeatureInfluence, InfluenceCategory};
use crate::model::PredictionVector;
use crate::segmentation::FeatureSegmentation;

pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const OVERLAY_FILE: &str = "overlay.png";

/// Rounds to six significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn sig6<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig6(*x))
}

fn sig6_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| round_sig6(*x)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueClass {
    pub index: usize,
    pub name: Option<String>,
    /// Probability of the true class for the unperturbed image.
    #[serde(serialize_with = "sig6")]
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbability {
    pub class: usize,
    pub name: Option<String>,
    #[serde(serialize_with = "sig6")]
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: usize,
    pub pixel_count: usize,
    #[serde(serialize_with = "sig6")]
    pub p_true_perturbed: f64,
    #[serde(serialize_with = "sig6")]
    pub ir: f64,
    #[serde(serialize_with = "sig6")]
    pub irp: f64,
    pub irp_degenerate: bool,
    pub category: InfluenceCategory,
}

/// Per-feature series for the IR and IRP bar charts, indexed by feature id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartData {
    #[serde(serialize_with = "sig6_vec")]
    pub ir: Vec<f64>,
    #[serde(serialize_with = "sig6_vec")]
    pub irp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRecord {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    #[serde(serialize_with = "sig6")]
    pub inertia: f64,
    /// Row-major feature id of every pixel.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Artifacts {
    pub overlay: Option<String>,
    pub perturbations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub schema_version: u32,
    pub image_id: String,
    pub true_class: TrueClass,
    pub original_top: Vec<ClassProbability>,
    pub features: Vec<FeatureRecord>,
    pub charts: ChartData,
    pub segmentation: SegmentationRecord,
    /// Effective run configuration, sufficient to reproduce the report.
    pub config: serde_json::Value,
    pub artifacts: Artifacts,
}

impl ExplanationReport {
    /// Assembles a report. `influences` must hold one entry per feature id `0..k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_id: impl Into<String>,
        true_class: usize,
        original: &PredictionVector,
        top_n: usize,
        influences: &[FeatureInfluence],
        segmentation: &FeatureSegmentation,
        config: serde_json::Value,
        artifacts: Artifacts,
    ) -> Result<Self> {
        check_feature_ids(influences, segmentation.k)?;
        let features = influences
            .iter()
            .map(|f| FeatureRecord {
                id: f.feature_id,
                pixel_count: f.pixel_count,
                p_true_perturbed: f.p_true_perturbed,
                ir: f.ir,
                irp: f.irp,
                irp_degenerate: f.irp_degenerate,
                category: f.category,
            })
            .collect();
        let report = ExplanationReport {
            schema_version: SCHEMA_VERSION,
            image_id: image_id.into(),
            true_class: TrueClass {
                index: true_class,
                name: original.class_name(true_class).map(str::to_owned),
                p: original.get(true_class),
            },
            original_top: original
                .top_n(top_n)
                .into_iter()
                .map(|(class, p)| ClassProbability {
                    class,
                    name: original.class_name(class).map(str::to_owned),
                    p,
                })
                .collect(),
            features,
            charts: ChartData {
                ir: influences.iter().map(|f| f.ir).collect(),
                irp: influences.iter().map(|f| f.irp).collect(),
            },
            segmentation: SegmentationRecord {
                height: segmentation.height(),
                width: segmentation.width(),
                k: segmentation.k,
                inertia: segmentation.inertia,
                labels: segmentation.label_map.iter().copied().collect(),
            },
            config,
            artifacts,
        };
        Ok(report.canonical())
    }

    /// Rounds every float to the precision written to disk, so that
    /// `from_json(to_json(r)) == r` holds exactly.
    pub fn canonical(mut self) -> Self {
        self.true_class.p = round_sig6(self.true_class.p);
        for c in &mut self.original_top {
            c.p = round_sig6(c.p);
        }
        for f in &mut self.features {
            f.p_true_perturbed = round_sig6(f.p_true_perturbed);
            f.ir = round_sig6(f.ir);
            f.irp = round_sig6(f.irp);
        }
        self.charts.ir.iter_mut().for_each(|v| *v = round_sig6(*v));
        self.charts.irp.iter_mut().for_each(|v| *v = round_sig6(*v));
        self.segmentation.inertia = round_sig6(self.segmentation.inertia);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn check_feature_ids(influences: &[FeatureInfluence], k: usize) -> Result<()> {
    if influences.len() != k
        || influences.iter().enumerate().any(|(i, f)| f.feature_id != i)
    {
        return Err(Error::InvalidInput(format!(
            "expected influences for features 0..{k}, got {} entries",
            influences.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlayStyle {
    /// Weight of the feature color in the blend.
    pub alpha: f64,
    /// IR ratio (or its inverse) at which color intensity saturates.
    pub cap: f64,
    /// Color strength at zero influence, so neutral features stay visible.
    pub min_strength: f64,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle {
            alpha: 0.5,
            cap: 10.0,
            min_strength: 0.25,
        }
    }
}

impl OverlayStyle {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.cap > 1.0 && self.cap.is_finite()) {
            return Err(Error::Config(format!("intensity cap must exceed 1, got {}", self.cap)));
        }
        if !(0.0..=1.0).contains(&self.min_strength) {
            return Err(Error::Config("min_strength must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// `min(|ln ir| / ln cap, 1)`.
    pub fn intensity(&self, ir: f64) -> f64 {
        (ir.ln().abs() / self.cap.ln()).min(1.0)
    }

    /// Color for a category at the given intensity: white blended toward the
    /// category's base color.
    pub fn color(&self, category: InfluenceCategory, intensity: f64) -> [f64; 3] {
        let base = base_color(category);
        let s = self.min_strength + (1.0 - self.min_strength) * intensity;
        base.map(|b| 255.0 * (1.0 - s) + b * s)
    }
}

pub fn base_color(category: InfluenceCategory) -> [f64; 3] {
    match category {
        InfluenceCategory::Positive => [0.0, 255.0, 0.0],
        InfluenceCategory::Neutral => [255.0, 255.0, 0.0],
        InfluenceCategory::Negative => [255.0, 0.0, 0.0],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LegendEntry {
    pub category: InfluenceCategory,
    /// Color at zero and at saturated intensity.
    pub weakest: [u8; 3],
    pub strongest: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayImage {
    pub pixels: Image,
    pub legend: Vec<LegendEntry>,
}

impl OverlayImage {
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.pixels.save_png(path)
    }
}

/// Tints every feature of `image` by the category and strength of its influence.
pub fn render_overlay(
    image: &Image,
    segmentation: &FeatureSegmentation,
    influences: &[FeatureInfluence],
    style: &OverlayStyle,
) -> Result<OverlayImage> {
    style.validate()?;
    check_feature_ids(influences, segmentation.k)?;
    if (segmentation.height(), segmentation.width()) != (image.height(), image.width()) {
        return Err(Error::ShapeMismatch(format!(
            "segmentation is {}x{}, image is {}x{}",
            segmentation.height(),
            segmentation.width(),
            image.height(),
            image.width()
        )));
    }
    let colors: Vec<[f64; 3]> = influences
        .iter()
        .map(|f| style.color(f.category, style.intensity(f.ir)))
        .collect();
    let rgb = image.to_rgb();
    let a = style.alpha;
    let pixels = Image::from_fn(image.height(), image.width(), 3, |y, x, c| {
        let color = colors[segmentation.label_map[[y, x]]][c];
        ((1.0 - a) * rgb.get(y, x, c) + a * color).round()
    });
    let to_u8 = |c: [f64; 3]| c.map(|v| v.round() as u8);
    let legend = [
        InfluenceCategory::Positive,
        InfluenceCategory::Neutral,
        InfluenceCategory::Negative,
    ]
    .into_iter()
    .map(|category| LegendEntry {
        category,
        weakest: to_u8(style.color(category, 0.0)),
        strongest: to_u8(style.color(category, 1.0)),
    })
    .collect();
    Ok(OverlayImage { pixels, legend })
}

/// Files produced by [`write_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct WrittenFiles {
    pub report: PathBuf,
    pub overlay: Option<PathBuf>,
}

/// Writes `report.json` and, when given, `overlay.png` into `out_dir`.
pub fn write_report(
    report: &ExplanationReport,
    overlay: Option<&OverlayImage>,
    out_dir: &Path,
) -> Result<WrittenFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report_path = out_dir.join(REPORT_FILE);
    std::fs::write(&report_path, report.to_json()?).map_err(|e| Error::io(&report_path, e))?;
    let overlay_path = match overlay {
        Some(o) => {
            let p = out_dir.join(OVERLAY_FILE);
            o.save_png(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(WrittenFiles {
        report: report_path,
        overlay: overlay_path,
    })
}

/// Plain bar chart: one bar per value colored by category, a gray line at
/// `reference`, bars scaled so the tallest fills the plot.
pub fn render_bar_chart(values: &[f64], categories: &[InfluenceCategory], reference: f64) -> Image {
    const BAR: usize = 24;
    const GAP: usize = 8;
    const HEIGHT: usize = 240;
    const MARGIN: usize = 10;
    let n = values.len().max(1);
    let width = 2 * MARGIN + n * BAR + (n - 1) * GAP;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let top = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(reference, f64::max)
        .max(f64::MIN_POSITIVE)
        * 1.1;
    let to_px = |v: f64| ((v.max(0.0) / top) * plot_h).round() as usize;
    let baseline = HEIGHT - MARGIN;

    let mut img = Image::filled(HEIGHT, width, 3, 255.0);
    for (i, &v) in values.iter().enumerate() {
        let color = categories
            .get(i)
            .map(|&c| base_color(c))
            .unwrap_or([128.0, 128.0, 128.0]);
        let x0 = MARGIN + i * (BAR + GAP);
        let bar_h = if v.is_finite() { to_px(v) } else { plot_h as usize };
        for y in baseline - bar_h..baseline {
            for x in x0..x0 + BAR {
                for (c, &cv) in color.iter().enumerate() {
                    img.set(y, x, c, cv);
                }
            }
        }
    }
    let ref_y = baseline - to_px(reference).min(baseline);
    for x in 0..width {
        for c in 0..3 {
            img.set(ref_y.min(HEIGHT - 1), x, c, 96.0);
            img.set(baseline.min(HEIGHT - 1), x, c, 0.0);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn influence(id: usize, ir: f64, category: InfluenceCategory, pixels: usize) -> FeatureInfluence {
        FeatureInfluence {
            feature_id: id,
            pixel_count: pixels,
            p_true_original: 0.051,
            p_true_perturbed: 0.051 / ir,
            ir,
            ir_per_class: vec![ir, 1.0],
            irp: ir / 2.0,
            irp_degenerate: false,
            category,
        }
    }

    fn halves(h: usize, w: usize) -> FeatureSegmentation {
        FeatureSegmentation {
            label_map: Array2::from_shape_fn((h, w), |(_, x)| usize::from(x >= w / 2)),
            centroids: Array2::zeros((2, 1)),
            inertia: 1.5,
            k: 2,
        }
    }

    #[test]
    fn sig6_rounding() {
        assert_eq!(round_sig6(5.151515151), 5.15152);
        assert_eq!(round_sig6(0.0510000001), 0.051);
        assert_eq!(round_sig6(123456789.0), 123457000.0);
        assert_eq!(round_sig6(0.0), 0.0);
        assert_eq!(round_sig6(round_sig6(2.0 / 3.0)), round_sig6(2.0 / 3.0));
    }

    #[test]
    fn all_neutral_is_uniform_yellow() {
        let img = Image::filled(4, 6, 3, 100.0);
        let seg = halves(4, 6);
        let inf = [
            influence(0, 1.0, InfluenceCategory::Neutral, 12),
            influence(1, 1.0, InfluenceCategory::Neutral, 12),
        ];
        let o = render_overlay(&img, &seg, &inf, &OverlayStyle::default()).unwrap();
        let first = o.pixels.pixel(0, 0).to_vec();
        assert!(first[0] == first[1] && first[0] > first[2], "yellow tint: {first:?}");
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(o.pixels.pixel(y, x), &first[..]);
            }
        }
    }

    #[test]
    fn capped_positive_is_full_green() {
        let img = Image::filled(2, 4, 3, 0.0);
        let seg = halves(2, 4);
        let style = OverlayStyle::default();
        let inf = [
            influence(0, style.cap, InfluenceCategory::Positive, 4),
            influence(1, 1.0, InfluenceCategory::Neutral, 4),
        ];
        let o = render_overlay(&img, &seg, &inf, &style).unwrap();
        assert_eq!(o.pixels.pixel(0, 0), &[0.0, 128.0, 0.0]);
        assert_eq!(style.intensity(style.cap * 10.0), 1.0);
        assert_eq!(style.intensity(0.0), 1.0);
    }

    #[test]
    fn stronger_influence_is_more_saturated() {
        let style = OverlayStyle::default();
        let img = Image::filled(2, 4, 3, 255.0);
        let seg = halves(2, 4);
        let inf = [
            influence(0, 0.68, InfluenceCategory::Negative, 4),
            influence(1, 5.10, InfluenceCategory::Positive, 4),
        ];
        let o = render_overlay(&img, &seg, &inf, &style).unwrap();
        let red = o.pixels.pixel(0, 0);
        let green = o.pixels.pixel(0, 3);
        assert!(red[0] > red[1] && red[0] > red[2]);
        assert!(green[1] > green[0] && green[1] > green[2]);
        // saturation = how far the off-channels drop below white
        let red_sat = 255.0 - red[1];
        let green_sat = 255.0 - green[0];
        assert!(green_sat > red_sat);
        assert!(style.intensity(5.10) > style.intensity(0.68));
    }

    #[test]
    fn region_pixel_counts_match_masks() {
        let img = Image::filled(3, 5, 1, 50.0);
        let seg = FeatureSegmentation {
            label_map: Array2::from_shape_fn((3, 5), |(y, x)| (y * 5 + x) % 3),
            centroids: Array2::zeros((3, 1)),
            inertia: 0.0,
            k: 3,
        };
        let counts = seg.pixel_counts();
        let inf = [
            influence(0, 3.0, InfluenceCategory::Positive, counts[0]),
            influence(1, 1.0, InfluenceCategory::Neutral, counts[1]),
            influence(2, 0.2, InfluenceCategory::Negative, counts[2]),
        ];
        let o = render_overlay(&img, &seg, &inf, &OverlayStyle::default()).unwrap();
        for (id, &count) in counts.iter().enumerate() {
            let (y0, x0) = seg.label_map.indexed_iter().find(|(_, &l)| l == id).unwrap().0;
            let color = o.pixels.pixel(y0, x0).to_vec();
            let n = (0..3)
                .flat_map(|y| (0..5).map(move |x| (y, x)))
                .filter(|&(y, x)| o.pixels.pixel(y, x) == &color[..])
                .count();
            assert_eq!(n, count);
        }
    }

    #[test]
    fn overlay_k_mismatch() {
        let img = Image::filled(2, 4, 3, 0.0);
        let inf = [influence(0, 1.0, InfluenceCategory::Neutral, 8)];
        assert!(render_overlay(&img, &halves(2, 4), &inf, &OverlayStyle::default()).is_err());
    }

    #[test]
    fn bar_chart_dimensions() {
        let img = render_bar_chart(
            &[5.1, 1.0, 0.68],
            &[
                InfluenceCategory::Positive,
                InfluenceCategory::Neutral,
                InfluenceCategory::Negative,
            ],
            1.0,
        );
        assert_eq!(img.height(), 240);
        assert_eq!(img.width(), 20 + 3 * 24 + 2 * 8);
        // tallest bar is green near the top of the plot
        assert_eq!(img.pixel(40, 20), &[0.0, 255.0, 0.0]);
    }
}
