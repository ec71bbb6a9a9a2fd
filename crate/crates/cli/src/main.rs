use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use boxlens::cache::ActivationCache;
use boxlens::fixture;
use boxlens::influence::InfluenceCategory;
use boxlens::model::Preprocessing;
use boxlens::pipeline::{self, ClassRef, ImageJob, OutputFormat, Resolution};
use boxlens::report::{self, ExplanationReport};
use boxlens::{BlackBox, ClassifierModel, Error, RunConfig};
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

/// Explain single predictions of an ONNX image classifier by blurring
/// clustered image features and measuring how the prediction changes.
#[derive(Parser)]
#[command(name = "boxlens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain one image or every image listed in a manifest.
    Explain(Box<ExplainArgs>),
    /// List the layers of a model and their activation shapes.
    Layers(LayersArgs),
    /// Draw IR and IRP bar charts from a report.json.
    Plot(PlotArgs),
    /// Write the built-in tiny demo network, its settings and a sample image.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// ONNX classifier.
    #[arg(long)]
    model: PathBuf,
    /// JSON preprocessing descriptor (resize, layout, scale, mean, std, ...).
    #[arg(long)]
    preprocess: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Image to explain.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    image: Option<PathBuf>,
    /// File with one `<image> <true class>` pair per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// True class of --image, as an index or a name from --class-names.
    #[arg(long, required_unless_present = "manifest")]
    true_class: Option<String>,
    /// One class name per line, in output order.
    #[arg(long)]
    class_names: Option<PathBuf>,
    /// Comma-separated layers for the hypercolumns [default: last 10 spatial layers].
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<String>>,
    /// Number of features.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 300)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// k-means++ restarts; the lowest-inertia clustering wins.
    #[arg(long, default_value_t = 1)]
    n_init: usize,
    /// Blur standard deviation in pixels [default: 10 px per 224 px of the shorter side].
    #[arg(long)]
    blur_sigma: Option<f64>,
    /// Blur kernel half-width [default: ceil(3 * sigma)].
    #[arg(long)]
    kernel_radius: Option<usize>,
    /// Floor on perturbed probabilities.
    #[arg(long, default_value_t = 1e-7)]
    epsilon: f64,
    /// IR interval treated as neutral, as `LOW,HIGH`.
    #[arg(long, default_value = "0.9,1.1")]
    neutral_band: String,
    /// Clustering grid: `native`, a scale such as `0.5`, or `HxW`.
    #[arg(long, default_value = "native")]
    resolution: String,
    /// Pixels sampled for fitting the clusters.
    #[arg(long, default_value_t = pipeline::DEFAULT_SAMPLE_PIXELS)]
    sample_pixels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip per-channel standardization of hypercolumns.
    #[arg(long)]
    no_normalize: bool,
    /// Allow non-spatial layers, tiled over every pixel.
    #[arg(long)]
    broadcast_fc: bool,
    /// Classes listed under the original prediction.
    #[arg(long, default_value_t = pipeline::DEFAULT_TOP_N)]
    top_n: usize,
    /// Worker threads [default: available parallelism].
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value = "boxlens-out")]
    out: PathBuf,
    /// Also save every perturbed image.
    #[arg(long)]
    dump_perturbations: bool,
    /// Also save the hypercolumn matrix (hypercolumns.bin).
    #[arg(long)]
    dump_hypercolumns: bool,
    /// `json` or `json+png`.
    #[arg(long, default_value = "json+png")]
    format: String,
}

#[derive(Args)]
struct LayersArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct PlotArgs {
    /// report.json to plot.
    report: PathBuf,
    /// Output directory [default: next to the report].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    /// Output directory.
    #[arg(long, default_value = "fixture")]
    out: PathBuf,
}

/// An error together with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_model_error() { EXIT_MODEL } else { EXIT_CONFIG };
        Failure {
            code,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Explain(args) => explain(*args),
        Command::Layers(args) => layers(args),
        Command::Plot(args) => plot(args),
        Command::Fixture(args) => write_fixture(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_model(args: &ModelArgs, broadcast_fc: bool) -> Result<(ClassifierModel, Preprocessing), Failure> {
    let pre = match &args.preprocess {
        Some(p) => Preprocessing::from_json_file(p)?,
        None => Preprocessing::default(),
    };
    let model = ClassifierModel::load(&args.model, pre.clone())?.with_non_spatial_layers(broadcast_fc);
    Ok((model, pre))
}

fn parse_band(s: &str) -> anyhow::Result<(f64, f64)> {
    let (lo, hi) = s
        .split_once(',')
        .with_context(|| format!("neutral band `{s}` is not LOW,HIGH"))?;
    Ok((
        lo.trim().parse().with_context(|| format!("bad band bound `{lo}`"))?,
        hi.trim().parse().with_context(|| format!("bad band bound `{hi}`"))?,
    ))
}

fn explain(args: ExplainArgs) -> Result<u8, Failure> {
    let resolution: Resolution = args.resolution.parse()?;
    let format: OutputFormat = args.format.parse()?;
    let neutral_band = parse_band(&args.neutral_band)?;
    let class_names = match &args.class_names {
        Some(p) => Some(Arc::new(pipeline::read_class_names(p)?)),
        None => None,
    };
    let jobs = match (&args.manifest, &args.image) {
        (Some(m), _) => pipeline::read_manifest(m)?,
        (None, Some(img)) => vec![ImageJob {
            path: img.clone(),
            true_class: ClassRef::parse(args.true_class.as_deref().unwrap_or_default()),
        }],
        (None, None) => unreachable!("clap requires --image or --manifest"),
    };

    let (model, preprocessing) = load_model(&args.model, args.broadcast_fc)?;
    if let Some(names) = &class_names {
        if names.len() != model.class_count() {
            return Err(anyhow::anyhow!(
                "{} class names for a model with {} classes",
                names.len(),
                model.class_count()
            )
            .into());
        }
    }

    let mut rc = RunConfig {
        model: args.model.model.clone(),
        preprocessing,
        class_names: args.class_names.clone(),
        layers: args.layers.clone(),
        broadcast_fc: args.broadcast_fc,
        normalize: !args.no_normalize,
        resolution,
        sample_pixels: args.sample_pixels,
        seed: args.seed,
        k: args.k,
        max_iterations: args.max_iterations,
        tolerance: args.tolerance,
        n_init: args.n_init,
        blur_sigma: args.blur_sigma,
        kernel_radius: args.kernel_radius,
        top_n: args.top_n,
        format,
        dump_perturbations: args.dump_perturbations,
        dump_hypercolumns: args.dump_hypercolumns,
        ..RunConfig::default()
    };
    rc.influence.epsilon = args.epsilon;
    rc.influence.neutral_band = neutral_band;
    let cfg = rc.resolve(&model)?;
    let cache = ActivationCache::from_env();
    let pool = pipeline::thread_pool(args.jobs)?;

    if args.manifest.is_none() {
        let job = &jobs[0];
        let id = pipeline::image_id(&job.path);
        let ex = pool.install(|| {
            pipeline::explain_file(&model, &cfg, job, &id, class_names.as_ref(), cache.as_ref(), &args.out)
        })?;
        print_summary(&ex.report, &args.out);
        return Ok(0);
    }

    let outcome = pool.install(|| {
        pipeline::run_batch(&model, &cfg, &jobs, class_names.as_ref(), cache.as_ref(), &args.out)
    })?;
    for (image, dir) in &outcome.succeeded {
        println!("{}: {}", image.display(), dir.join(report::REPORT_FILE).display());
    }
    for (image, e) in &outcome.failed {
        eprintln!("failed: {}: {e}", image.display());
    }
    println!(
        "{} of {} images explained; summary in {}",
        outcome.succeeded.len(),
        jobs.len(),
        args.out.join(pipeline::BATCH_SUMMARY_FILE).display()
    );
    Ok(if outcome.failed.is_empty() { 0 } else { EXIT_PARTIAL })
}

fn print_summary(report: &ExplanationReport, out: &Path) {
    let tc = &report.true_class;
    let name = tc.name.as_deref().map(|n| format!(" ({n})")).unwrap_or_default();
    println!("{}: true class {}{name}, p = {}", report.image_id, tc.index, tc.p);
    println!("{:>4} {:>8} {:>10} {:>10} {:>10}  category", "id", "pixels", "p_pert", "IR", "IRP");
    for f in &report.features {
        println!(
            "{:>4} {:>8} {:>10.4} {:>10.4} {:>10.4}  {}",
            f.id,
            f.pixel_count,
            f.p_true_perturbed,
            f.ir,
            f.irp,
            f.category.as_str()
        );
    }
    println!("report: {}", out.join(report::REPORT_FILE).display());
}

fn layers(args: LayersArgs) -> Result<u8, Failure> {
    let pre = match &args.model.preprocess {
        Some(p) => Preprocessing::from_json_file(p)?,
        None => Preprocessing::default(),
    };
    // Unlike `explain`, a model file that cannot be opened at all is a model error here.
    let model = ClassifierModel::load(&args.model.model, pre).map_err(|e| Failure {
        code: if matches!(e, Error::Config(_)) { EXIT_CONFIG } else { EXIT_MODEL },
        error: e.into(),
    })?;
    let (h, w, c) = model.input_shape();
    println!("input {h}x{w}x{c}, {} classes", model.class_count());
    println!("{:<3}{:<32} {:<20} {:<16}", "", "layer", "op", "shape (HxWxC)");
    for l in model.layer_catalog() {
        let mark = if l.is_spatial() && !l.is_input { "*" } else { "" };
        let (lh, lw, lc) = l.shape;
        println!("{mark:<3}{:<32} {:<20} {lh}x{lw}x{lc}", l.name, l.op);
    }
    println!("* eligible for hypercolumns");
    Ok(0)
}

fn plot(args: PlotArgs) -> Result<u8, Failure> {
    let report = ExplanationReport::read(&args.report)?;
    let out = args
        .out
        .unwrap_or_else(|| args.report.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let categories: Vec<InfluenceCategory> = report.features.iter().map(|f| f.category).collect();
    for (name, values) in [("ir.png", &report.charts.ir), ("irp.png", &report.charts.irp)] {
        let path = out.join(name);
        report::render_bar_chart(values, &categories, 1.0).save_png(&path)?;
        println!("{}", path.display());
    }
    Ok(0)
}

fn write_fixture(args: FixtureArgs) -> Result<u8, Failure> {
    let out = &args.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let write = |name: &str, bytes: &[u8]| -> anyhow::Result<PathBuf> {
        let p = out.join(name);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    };
    let pre = Preprocessing {
        scale: 1.0 / 255.0,
        ..Preprocessing::default()
    };
    let paths = [
        write("tiny_cnn.onnx", &fixture::tiny_cnn().to_onnx())?,
        write("tiny_cnn.preprocess.json", pre.to_json()?.as_bytes())?,
        write("classes.txt", b"texture\nbrightness\nbias\nbaseline\n")?,
    ];
    let image = out.join("quadrant.png");
    fixture::textured_quadrant_image().save_png(&image)?;
    for p in paths.iter().chain([&image]) {
        println!("{}", p.display());
    }
    Ok(0)
}
