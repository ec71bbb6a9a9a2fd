//! Feature influence indices.
//!
//! * IR (influence relation): original probability of a class divided by its
//!   probability once the feature is blurred. Above 1 the feature supported
//!   the class, below 1 it worked against it.
//! * IRP (influence relation precision): the true class's IR divided by the
//!   average IR over all classes, weighted by the original prediction. Above 1
//!   the feature's influence is specific to the true class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{BlackBox, PredictionVector};
use crate::perturbation::{self, BlurConfig, FeatureMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceConfig {
    /// Floor applied to perturbed probabilities before dividing.
    pub epsilon: f64,
    /// Closed interval of IR values considered neutral.
    pub neutral_band: (f64, f64),
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            epsilon: 1e-7,
            neutral_band: (0.9, 1.1),
        }
    }
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        let (lo, hi) = self.neutral_band;
        if !(lo <= 1.0 && 1.0 <= hi) {
            return Err(Error::Config(format!(
                "neutral band [{lo}, {hi}] must contain 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceCategory {
    Positive,
    Neutral,
    Negative,
}

impl InfluenceCategory {
    /// Band edges count as neutral.
    pub fn of(ir: f64, band: (f64, f64)) -> Self {
        if ir > band.1 {
            InfluenceCategory::Positive
        } else if ir < band.0 {
            InfluenceCategory::Negative
        } else {
            InfluenceCategory::Neutral
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InfluenceCategory::Positive => "positive",
            InfluenceCategory::Neutral => "neutral",
            InfluenceCategory::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureInfluence {
    pub feature_id: usize,
    pub pixel_count: usize,
    pub p_true_original: f64,
    pub p_true_perturbed: f64,
    pub ir: f64,
    pub ir_per_class: Vec<f64>,
    pub irp: f64,
    /// Set when the weighted IR average fell below epsilon and IRP was forced to 0.
    pub irp_degenerate: bool,
    pub category: InfluenceCategory,
}

/// `p_original / max(p_perturbed, epsilon)`, and 0 whenever `p_original` is 0.
pub fn ir_index(p_original: f64, p_perturbed: f64, config: &InfluenceConfig) -> f64 {
    if p_original <= 0.0 {
        return 0.0;
    }
    p_original / p_perturbed.max(config.epsilon)
}

/// Class-wise IR between two predictions.
pub fn ir_per_class(
    original: &PredictionVector,
    perturbed: &PredictionVector,
    config: &InfluenceConfig,
) -> Result<Vec<f64>> {
    if original.len() != perturbed.len() {
        return Err(Error::ShapeMismatch(format!(
            "predictions have {} and {} classes",
            original.len(),
            perturbed.len()
        )));
    }
    Ok(original
        .probabilities()
        .iter()
        .zip(perturbed.probabilities())
        .map(|(&o, &p)| ir_index(o, p, config))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Irp {
    pub value: f64,
    pub degenerate: bool,
}

/// IR of `true_class` over the `weights`-weighted mean IR of all classes.
/// `weights` must be the prediction for the unperturbed image.
pub fn irp_index(
    ir_per_class: &[f64],
    weights: &PredictionVector,
    true_class: usize,
    config: &InfluenceConfig,
) -> Result<Irp> {
    if ir_per_class.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} IR values for {} classes",
            ir_per_class.len(),
            weights.len()
        )));
    }
    if true_class >= weights.len() {
        return Err(Error::InvalidInput(format!(
            "class {true_class} out of range for {} classes",
            weights.len()
        )));
    }
    let t = ir_per_class[true_class];
    if t > 0.0 && ir_per_class.iter().all(|&v| v == t) {
        // Uniform ratios; the weighted sum would otherwise round away from t.
        return Ok(Irp {
            value: 1.0,
            degenerate: false,
        });
    }
    let w = weights.probabilities();
    let weighted: f64 = w.iter().zip(ir_per_class).map(|(w, ir)| w * ir).sum();
    let total: f64 = w.iter().sum();
    let average = weighted / total;
    if average < config.epsilon {
        return Ok(Irp {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Irp {
        value: t / average,
        degenerate: false,
    })
}

/// Scores one feature from the original and perturbed predictions.
pub fn score_feature(
    feature_id: usize,
    pixel_count: usize,
    original: &PredictionVector,
    perturbed: &PredictionVector,
    true_class: usize,
    config: &InfluenceConfig,
) -> Result<FeatureInfluence> {
    let per_class = ir_per_class(original, perturbed, config)?;
    let irp = irp_index(&per_class, original, true_class, config)?;
    let ir = per_class[true_class];
    Ok(FeatureInfluence {
        feature_id,
        pixel_count,
        p_true_original: original.get(true_class),
        p_true_perturbed: perturbed.get(true_class),
        ir,
        ir_per_class: per_class,
        irp: irp.value,
        irp_degenerate: irp.degenerate,
        category: InfluenceCategory::of(ir, config.neutral_band),
    })
}

/// The record for a feature with no pixels: nothing is perturbed, so both
/// indices are exactly 1.
pub fn unperturbed_influence(
    feature_id: usize,
    original: &PredictionVector,
    true_class: usize,
) -> FeatureInfluence {
    let p = original.get(true_class);
    FeatureInfluence {
        feature_id,
        pixel_count: 0,
        p_true_original: p,
        p_true_perturbed: p,
        ir: 1.0,
        ir_per_class: vec![1.0; original.len()],
        irp: 1.0,
        irp_degenerate: false,
        category: InfluenceCategory::Neutral,
    }
}

/// Blurs `mask` in `image`, re-classifies and scores the feature. Empty masks
/// skip the model call.
pub fn analyze_feature(
    model: &dyn BlackBox,
    image: &Image,
    original: &PredictionVector,
    mask: &FeatureMask,
    true_class: usize,
    blur: &BlurConfig,
    config: &InfluenceConfig,
) -> Result<FeatureInfluence> {
    if true_class >= original.len() {
        return Err(Error::InvalidInput(format!(
            "class {true_class} out of range for {} classes",
            original.len()
        )));
    }
    if mask.empty {
        return Ok(unperturbed_influence(mask.feature_id, original, true_class));
    }
    let perturbed_image = perturbation::apply_masked_blur(image, mask, blur)?;
    let perturbed = model.predict(&perturbed_image)?;
    score_feature(
        mask.feature_id,
        mask.pixel_count,
        original,
        &perturbed,
        true_class,
        config,
    )
}
