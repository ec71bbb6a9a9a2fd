//! Local explanations for black-box image classifiers.
//!
//! An image is split into interpretable features by clustering per-pixel
//! hypercolumns (activations of several network layers stacked per pixel).
//! Each feature is then blurred in turn and the image re-classified; the
//! change in class probabilities is summarized by two indices:
//!
//! * **IR**: the true class's original probability over its probability with
//!   the feature blurred;
//! * **IRP**: the true class's IR over the prediction-weighted mean IR of all
//!   classes.
//!
//! The result is a JSON report and an overlay coloring each feature green
//! (supports the true class), yellow (neutral) or red (works against it).

pub mod cache;
pub mod error;
pub mod fixture;
pub mod hypercolumn;
pub mod image;
pub mod influence;
pub mod model;
pub mod perturbation;
pub mod pipeline;
pub mod report;
pub mod segmentation;

pub use error::{Error, Result};
pub use image::Image;
pub use influence::{FeatureInfluence, InfluenceCategory, InfluenceConfig};
pub use model::{ActivationVolume, BlackBox, ClassifierModel, LayerInfo, PredictionVector, Preprocessing};
pub use pipeline::{ResolvedConfig, RunConfig};
pub use report::ExplanationReport;
pub use segmentation::{FeatureSegmentation, KMeansConfig};
