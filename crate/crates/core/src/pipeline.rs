//! End-to-end explanation of single images and manifest batches.
//!
//! Order of work per image: classify the original, extract hypercolumns and
//! cluster them into features, then blur and re-classify each feature, score
//! it and write the report. Feature extraction always finishes before the
//! first perturbation is classified.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::hypercolumn::{self, HypercolumnMatrix};
use crate::image::Image;
use crate::influence::{self, FeatureInfluence, InfluenceConfig};
use crate::model::{BlackBox, ClassifierModel, Preprocessing, PredictionVector, ResizePolicy};
use crate::perturbation::{self, BlurConfig, FeatureMask};
use crate::report::{self, Artifacts, ExplanationReport, OverlayImage, OverlayStyle};
use crate::segmentation::{self, FeatureSegmentation, KMeansConfig};

/// How many trailing spatial layers feed the hypercolumns by default.
pub const DEFAULT_LAYER_COUNT: usize = 10;
pub const DEFAULT_SAMPLE_PIXELS: usize = 20_000;
pub const DEFAULT_TOP_N: usize = 5;
pub const HYPERCOLUMN_DUMP_FILE: &str = "hypercolumns.bin";
pub const BATCH_SUMMARY_FILE: &str = "batch_summary.json";

/// Grid on which hypercolumns are built and clustered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// The model's input resolution.
    #[default]
    Native,
    /// The input resolution multiplied by a factor in (0, 1].
    Scale(f64),
    Size { height: usize, width: usize },
}

impl Resolution {
    pub fn resolve(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        match *self {
            Resolution::Native => Ok(input),
            Resolution::Scale(s) if s > 0.0 && s <= 1.0 => Ok((
                ((input.0 as f64 * s).round() as usize).max(1),
                ((input.1 as f64 * s).round() as usize).max(1),
            )),
            Resolution::Scale(s) => Err(Error::Config(format!(
                "resolution scale must be in (0, 1], got {s}"
            ))),
            Resolution::Size { height, width } if height > 0 && width > 0 => Ok((height, width)),
            Resolution::Size { .. } => Err(Error::Config("resolution must be positive".into())),
        }
    }
}

impl FromStr for Resolution {
    type Err = Error;

    /// `native`, a scale such as `0.5`, or `HEIGHTxWIDTH`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("native") {
            return Ok(Resolution::Native);
        }
        if let Some((h, w)) = s.split_once(['x', 'X']) {
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad resolution `{s}`")))
            };
            return Ok(Resolution::Size {
                height: parse(h)?,
                width: parse(w)?,
            });
        }
        s.parse::<f64>()
            .map(Resolution::Scale)
            .map_err(|_| Error::Config(format!("bad resolution `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    #[default]
    JsonPng,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "json+png" => Ok(OutputFormat::JsonPng),
            other => Err(Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

/// User-facing settings; unset options fall back to defaults derived from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    pub preprocessing: Preprocessing,
    pub class_names: Option<PathBuf>,
    /// Layer names; `None` selects the last ten spatial layers.
    pub layers: Option<Vec<String>>,
    /// Include non-spatial layers by tiling their vector over every pixel.
    pub broadcast_fc: bool,
    /// Standardize hypercolumn channels before clustering.
    pub normalize: bool,
    pub resolution: Resolution,
    pub sample_pixels: usize,
    pub seed: u64,
    pub k: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub n_init: usize,
    /// `None` scales the 10 px @ 224 default to the input size.
    pub blur_sigma: Option<f64>,
    pub kernel_radius: Option<usize>,
    pub influence: InfluenceConfig,
    pub overlay: OverlayStyle,
    pub top_n: usize,
    pub format: OutputFormat,
    pub dump_perturbations: bool,
    pub dump_hypercolumns: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let km = KMeansConfig::default();
        RunConfig {
            model: PathBuf::new(),
            preprocessing: Preprocessing::default(),
            class_names: None,
            layers: None,
            broadcast_fc: false,
            normalize: true,
            resolution: Resolution::Native,
            sample_pixels: DEFAULT_SAMPLE_PIXELS,
            seed: km.seed,
            k: km.k,
            max_iterations: km.max_iterations,
            tolerance: km.tolerance,
            n_init: km.n_init,
            blur_sigma: None,
            kernel_radius: None,
            influence: InfluenceConfig::default(),
            overlay: OverlayStyle::default(),
            top_n: DEFAULT_TOP_N,
            format: OutputFormat::JsonPng,
            dump_perturbations: false,
            dump_hypercolumns: false,
        }
    }
}

impl RunConfig {
    pub fn load_model(&self) -> Result<ClassifierModel> {
        Ok(ClassifierModel::load(&self.model, self.preprocessing.clone())?
            .with_non_spatial_layers(self.broadcast_fc))
    }

    /// Fills every default against `model`.
    pub fn resolve(&self, model: &dyn BlackBox) -> Result<ResolvedConfig> {
        let (h, w, _) = model.input_shape();
        let layers = match &self.layers {
            Some(l) if l.is_empty() => return Err(Error::Config("layer list is empty".into())),
            Some(l) => l.clone(),
            None => default_layers(model, DEFAULT_LAYER_COUNT),
        };
        for name in &layers {
            let info = model
                .layer_catalog()
                .iter()
                .find(|l| &l.name == name)
                .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            if !info.is_spatial() && !self.broadcast_fc {
                return Err(Error::NonSpatialLayer(name.clone()));
            }
        }
        let kmeans = KMeansConfig {
            k: self.k,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            seed: self.seed,
            n_init: self.n_init,
        };
        kmeans.validate()?;
        if self.sample_pixels < self.k {
            return Err(Error::Config(format!(
                "sample_pixels ({}) must be at least k ({})",
                self.sample_pixels, self.k
            )));
        }
        let mut blur = match self.blur_sigma {
            Some(s) => BlurConfig::with_sigma(s)?,
            None => BlurConfig::for_resolution(h, w),
        };
        if let Some(r) = self.kernel_radius {
            blur.kernel_radius = r;
        }
        blur.validate()?;
        self.influence.validate()?;
        self.overlay.validate()?;
        let working_resolution = self.resolution.resolve((h, w))?;
        if working_resolution.0 * working_resolution.1 < self.k {
            return Err(Error::Config(format!(
                "working resolution {working_resolution:?} has fewer pixels than k = {}",
                self.k
            )));
        }
        Ok(ResolvedConfig {
            model: self.model.clone(),
            model_sha256: model.fingerprint().map(str::to_owned),
            preprocessing: self.preprocessing.clone(),
            input_size: (h, w),
            layers,
            broadcast_fc: self.broadcast_fc,
            normalize: self.normalize,
            working_resolution,
            sample_pixels: self.sample_pixels,
            seed: self.seed,
            kmeans,
            blur,
            influence: self.influence.clone(),
            overlay: self.overlay.clone(),
            top_n: self.top_n,
            format: self.format,
            dump_perturbations: self.dump_perturbations,
            dump_hypercolumns: self.dump_hypercolumns,
        })
    }
}

/// The last `count` spatial (non-input) layers in graph order.
pub fn default_layers(model: &dyn BlackBox, count: usize) -> Vec<String> {
    let spatial: Vec<&str> = model
        .layer_catalog()
        .iter()
        .filter(|l| l.is_spatial() && !l.is_input)
        .map(|l| l.name.as_str())
        .collect();
    spatial[spatial.len().saturating_sub(count)..]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Fully resolved settings; echoed verbatim into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub model: PathBuf,
    pub model_sha256: Option<String>,
    pub preprocessing: Preprocessing,
    pub input_size: (usize, usize),
    pub layers: Vec<String>,
    pub broadcast_fc: bool,
    pub normalize: bool,
    pub working_resolution: (usize, usize),
    pub sample_pixels: usize,
    pub seed: u64,
    pub kmeans: KMeansConfig,
    pub blur: BlurConfig,
    pub influence: InfluenceConfig,
    pub overlay: OverlayStyle,
    pub top_n: usize,
    pub format: OutputFormat,
    pub dump_perturbations: bool,
    pub dump_hypercolumns: bool,
}

/// In-memory result for one image.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub report: ExplanationReport,
    pub original: PredictionVector,
    /// Segmentation at the analysed image's resolution.
    pub segmentation: FeatureSegmentation,
    pub masks: Vec<FeatureMask>,
    pub influences: Vec<FeatureInfluence>,
    pub overlay: Option<OverlayImage>,
    /// Perturbed images by feature id, kept only when dumping is enabled.
    pub perturbed: Vec<Option<Image>>,
    pub hypercolumns: Option<HypercolumnMatrix>,
}

/// Runs the whole explanation for one image already loaded into memory.
pub fn explain_image(
    model: &dyn BlackBox,
    image: &Image,
    image_id: &str,
    true_class: usize,
    cfg: &ResolvedConfig,
    class_names: Option<&Arc<Vec<String>>>,
    cache: Option<&ActivationCache>,
) -> Result<Explanation> {
    let (h, w, c) = model.input_shape();
    if image.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "image has {} channels, model expects {c}",
            image.channels()
        )));
    }
    if (image.height(), image.width()) != (h, w) && cfg.preprocessing.resize == ResizePolicy::Exact {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}, model expects {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let image = image.resized(h, w);
    if true_class >= model.class_count() {
        return Err(Error::Config(format!(
            "true class {true_class} out of range for {} classes",
            model.class_count()
        )));
    }

    let mut original = model.predict(&image)?;
    if let Some(names) = class_names {
        original = original.with_class_names(names.clone())?;
    }

    // Interpretable features.
    let volumes = match (cache, model.fingerprint()) {
        (Some(cache), Some(fp)) => {
            let key = ActivationCache::key(fp, &image, &cfg.layers);
            match cache.load(&key) {
                Some(v) => v,
                None => {
                    let v = model.activations(&image, &cfg.layers)?;
                    if let Err(e) = cache.store(&key, &v) {
                        log::warn!("activation cache write failed: {e}");
                    }
                    v
                }
            }
        }
        _ => model.activations(&image, &cfg.layers)?,
    };
    let matrix = hypercolumn::build_hypercolumns(&volumes, cfg.working_resolution, cfg.normalize)?;
    drop(volumes);
    let sample = hypercolumn::subsample_rows(&matrix, cfg.sample_pixels, cfg.seed);
    let fit = segmentation::kmeans_fit(&sample, &cfg.kmeans)?;
    drop(sample);
    info!(
        "{image_id}: k-means finished after {} iterations (inertia {:.4})",
        fit.iterations, fit.inertia
    );
    let segmentation = segmentation::assign_labels(&matrix, &fit.centroids)?.resized(h, w);
    let masks = segmentation::extract_masks(&segmentation);
    segmentation::verify_partition(&masks, h, w)?;
    let hypercolumns = cfg.dump_hypercolumns.then_some(matrix);

    // Perturbation and scoring.
    let blurred = perturbation::gaussian_blur(&image, &cfg.blur)?;
    let scored: Vec<(FeatureInfluence, Option<Image>)> = masks
        .par_iter()
        .map(|mask| {
            if mask.empty {
                return Ok((
                    influence::unperturbed_influence(mask.feature_id, &original, true_class),
                    cfg.dump_perturbations.then(|| image.clone()),
                ));
            }
            let perturbed_image = perturbation::composite(&image, &blurred, mask)?;
            let perturbed = model.predict(&perturbed_image)?;
            let f = influence::score_feature(
                mask.feature_id,
                mask.pixel_count,
                &original,
                &perturbed,
                true_class,
                &cfg.influence,
            )?;
            Ok((f, cfg.dump_perturbations.then_some(perturbed_image)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (influences, perturbed): (Vec<_>, Vec<_>) = scored.into_iter().unzip();

    let overlay = match cfg.format {
        OutputFormat::JsonPng => Some(report::render_overlay(
            &image,
            &segmentation,
            &influences,
            &cfg.overlay,
        )?),
        OutputFormat::Json => None,
    };
    let artifacts = Artifacts {
        overlay: overlay.as_ref().map(|_| report::OVERLAY_FILE.to_string()),
        perturbations: if cfg.dump_perturbations {
            (0..cfg.kmeans.k).map(perturbation_file).collect()
        } else {
            Vec::new()
        },
    };
    let config = serde_json::to_value(cfg)?;
    let report = ExplanationReport::new(
        image_id,
        true_class,
        &original,
        cfg.top_n,
        &influences,
        &segmentation,
        config,
        artifacts,
    )?;
    Ok(Explanation {
        report,
        original,
        segmentation,
        masks,
        influences,
        overlay,
        perturbed,
        hypercolumns,
    })
}

pub fn perturbation_file(feature_id: usize) -> String {
    format!("perturbation_{feature_id:02}.png")
}

/// Writes the report and every enabled artifact into `out_dir`.
pub fn write_explanation(explanation: &Explanation, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let written = report::write_report(&explanation.report, explanation.overlay.as_ref(), out_dir)?;
    let mut files = vec![written.report];
    files.extend(written.overlay);
    for (id, img) in explanation.perturbed.iter().enumerate() {
        if let Some(img) = img {
            let p = out_dir.join(perturbation_file(id));
            img.save_png(&p)?;
            files.push(p);
        }
    }
    if let Some(m) = &explanation.hypercolumns {
        let p = out_dir.join(HYPERCOLUMN_DUMP_FILE);
        m.write_binary(&p)?;
        files.push(p);
    }
    Ok(files)
}

/// True class given by index or by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassRef {
    Index(usize),
    Name(String),
}

impl ClassRef {
    pub fn parse(s: &str) -> Self {
        match s.trim().parse::<usize>() {
            Ok(i) => ClassRef::Index(i),
            Err(_) => ClassRef::Name(s.trim().to_string()),
        }
    }

    pub fn resolve(&self, class_names: Option<&[String]>, class_count: usize) -> Result<usize> {
        let index = match self {
            ClassRef::Index(i) => *i,
            ClassRef::Name(n) => class_names
                .ok_or_else(|| {
                    Error::Config(format!("class `{n}` given by name but no class names loaded"))
                })?
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::Config(format!("unknown class name `{n}`")))?,
        };
        if index >= class_count {
            return Err(Error::Config(format!(
                "true class {index} out of range for {class_count} classes"
            )));
        }
        Ok(index)
    }
}

/// One class label per line; blank lines are ignored.
pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageJob {
    pub path: PathBuf,
    pub true_class: ClassRef,
}

/// Manifest lines are `<image path> <true class>`, whitespace-separated;
/// `#` starts a comment. Relative paths are resolved against the manifest's
/// directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ImageJob>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut jobs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (img, class) = line.rsplit_once(char::is_whitespace).ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected `<image> <true class>`",
                path.display(),
                n + 1
            ))
        })?;
        let img = PathBuf::from(img.trim());
        jobs.push(ImageJob {
            path: if img.is_absolute() { img } else { base.join(img) },
            true_class: ClassRef::parse(class),
        });
    }
    if jobs.is_empty() {
        return Err(Error::Config(format!("manifest {} lists no images", path.display())));
    }
    Ok(jobs)
}

pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    /// (image path, report directory) per successful image.
    pub succeeded: Vec<(PathBuf, PathBuf)>,
    /// (image path, error) per failed image.
    pub failed: Vec<(PathBuf, Error)>,
}

#[derive(Serialize)]
struct BatchSummary<'a> {
    succeeded: Vec<Succeeded<'a>>,
    failed: Vec<Failed<'a>>,
}

#[derive(Serialize)]
struct Succeeded<'a> {
    image: &'a Path,
    report_dir: &'a Path,
}

#[derive(Serialize)]
struct Failed<'a> {
    image: &'a Path,
    error: String,
}

/// Explains every job, writing each report to its own subdirectory of
/// `out_dir` (named after the image stem) plus a `batch_summary.json`.
pub fn run_batch(
    model: &dyn BlackBox,
    cfg: &ResolvedConfig,
    jobs: &[ImageJob],
    class_names: Option<&Arc<Vec<String>>>,
    cache: Option<&ActivationCache>,
    out_dir: &Path,
) -> Result<BatchOutcome> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let ids: Vec<String> = jobs
        .iter()
        .map(|j| {
            let id = image_id(&j.path);
            let n = seen.entry(id.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                id
            } else {
                format!("{id}_{n}")
            }
        })
        .collect();

    let results: Vec<Result<PathBuf>> = jobs
        .par_iter()
        .zip(ids.par_iter())
        .map(|(job, id)| {
            let dir = out_dir.join(id);
            explain_file(model, cfg, job, id, class_names, cache, &dir).map(|_| dir)
        })
        .collect();

    let mut outcome = BatchOutcome::default();
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok(dir) => outcome.succeeded.push((job.path.clone(), dir)),
            Err(e) => outcome.failed.push((job.path.clone(), e)),
        }
    }
    let summary = BatchSummary {
        succeeded: outcome
            .succeeded
            .iter()
            .map(|(image, report_dir)| Succeeded { image, report_dir })
            .collect(),
        failed: outcome
            .failed
            .iter()
            .map(|(image, e)| Failed {
                image,
                error: e.to_string(),
            })
            .collect(),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary_path = out_dir.join(BATCH_SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    Ok(outcome)
}

/// Loads, explains and writes a single image file.
pub fn explain_file(
    model: &dyn BlackBox,
    cfg: &ResolvedConfig,
    job: &ImageJob,
    id: &str,
    class_names: Option<&Arc<Vec<String>>>,
    cache: Option<&ActivationCache>,
    out_dir: &Path,
) -> Result<Explanation> {
    let true_class = job
        .true_class
        .resolve(class_names.map(|n| n.as_slice()), model.class_count())?;
    let image = Image::open(&job.path, model.input_shape().2)?;
    let explanation = explain_image(model, &image, id, true_class, cfg, class_names, cache)?;
    write_explanation(&explanation, out_dir)?;
    Ok(explanation)
}

/// Builds a rayon pool of `jobs` threads (0 = available parallelism).
pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}
