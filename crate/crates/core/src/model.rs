//! Black-box classifier access: class probabilities plus intermediate activations.
//!
//! The explanation pipeline only talks to the [`BlackBox`] trait. The shipped
//! implementation, [`ClassifierModel`], runs ONNX networks through `tract`.
//! Intermediate layers are exposed by re-targeting the graph outputs to the
//! requested node names, so no offline model rewrite is needed.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use log::warn;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tract_onnx::tract_hir::infer::Factoid;
use tract_onnx::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

/// Allowed deviation of a probability vector's sum from 1.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-5;

/// Everything the explanation engine needs from a classifier.
pub trait BlackBox: Send + Sync {
    fn class_count(&self) -> usize;

    /// Expected raw input as (height, width, channels).
    fn input_shape(&self) -> (usize, usize, usize);

    fn layer_catalog(&self) -> &[LayerInfo];

    fn predict(&self, image: &Image) -> Result<PredictionVector>;

    /// One volume per requested layer, in request order.
    fn activations(&self, image: &Image, layers: &[String]) -> Result<Vec<ActivationVolume>>;

    /// Stable identity of the model weights, used as an activation-cache key.
    fn fingerprint(&self) -> Option<&str> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Produces a spatial feature map (height or width greater than one).
    Convolutional,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub op: String,
    /// Raw output dimensions as reported by the network, batch included.
    pub dims: Vec<usize>,
    /// Activation shape as (height, width, channels).
    pub shape: (usize, usize, usize),
    pub kind: LayerKind,
    /// True for the network's input node.
    pub is_input: bool,
}

impl LayerInfo {
    pub fn is_spatial(&self) -> bool {
        self.kind == LayerKind::Convolutional
    }
}

/// Per-class probabilities produced by the black box.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    probabilities: Vec<f64>,
    class_names: Option<Arc<Vec<String>>>,
}

impl PredictionVector {
    /// Validates a probability vector: at least two entries, all finite and
    /// non-negative, summing to one within [`PROBABILITY_SUM_TOLERANCE`].
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        Self::check_entries(&probabilities)?;
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(PredictionVector {
            probabilities,
            class_names: None,
        })
    }

    /// Like [`PredictionVector::new`] but rescales vectors whose sum is off by
    /// more than the tolerance instead of rejecting them.
    pub fn normalized(mut probabilities: Vec<f64>) -> Result<Self> {
        Self::check_entries(&probabilities)?;
        let sum: f64 = probabilities.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Inference("model returned an all-zero output".into()));
        }
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            warn!("model output sums to {sum}; renormalizing");
            probabilities.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(PredictionVector {
            probabilities,
            class_names: None,
        })
    }

    /// Numerically stable softmax over raw scores.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Inference("non-finite logits".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / sum).collect())
    }

    fn check_entries(p: &[f64]) -> Result<()> {
        if p.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a prediction needs at least two classes, got {}",
                p.len()
            )));
        }
        if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::Inference(format!(
                "class {i} has invalid probability {v}"
            )));
        }
        Ok(())
    }

    pub fn with_class_names(mut self, names: Arc<Vec<String>>) -> Result<Self> {
        if names.len() != self.probabilities.len() {
            return Err(Error::Config(format!(
                "{} class names for a {}-class model",
                names.len(),
                self.probabilities.len()
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probabilities[class]
    }

    pub fn class_name(&self, class: usize) -> Option<&str> {
        self.class_names
            .as_ref()
            .and_then(|n| n.get(class))
            .map(String::as_str)
    }

    /// The `n` most probable classes, highest first; ties keep the lower index first.
    pub fn top_n(&self, n: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..self.probabilities.len()).collect();
        idx.sort_by(|&a, &b| {
            self.probabilities[b]
                .total_cmp(&self.probabilities[a])
                .then(a.cmp(&b))
        });
        idx.into_iter()
            .take(n)
            .map(|i| (i, self.probabilities[i]))
            .collect()
    }

    pub fn argmax(&self) -> usize {
        self.top_n(1)[0].0
    }
}

/// Activation tensor of one layer laid out as (height, width, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVolume {
    pub layer_name: String,
    pub data: Array3<f64>,
    pub kind: LayerKind,
}

impl ActivationVolume {
    pub fn new(layer_name: impl Into<String>, data: Array3<f64>, kind: LayerKind) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::ShapeMismatch(format!(
                "activation volume must be non-empty, got {h}x{w}x{c}"
            )));
        }
        Ok(ActivationVolume {
            layer_name: layer_name.into(),
            data,
            kind,
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Images of another size are resized (aspect ratio not preserved).
    #[default]
    Stretch,
    /// Images must already match the network input.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TensorLayout {
    #[default]
    Nchw,
    Nhwc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelOrder {
    #[default]
    Rgb,
    Bgr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    #[default]
    Probabilities,
    /// Softmax is applied to the network output.
    Logits,
}

/// How raw 0..=255 images become network input.
///
/// Each sample is mapped to `(value * scale - mean[c]) / std[c]` after the
/// optional channel reorder; empty `mean`/`std` mean 0 and 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocessing {
    pub resize: ResizePolicy,
    pub layout: TensorLayout,
    pub channel_order: ChannelOrder,
    pub scale: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub output: OutputKind,
    /// Input (height, width) for networks declaring symbolic spatial dimensions.
    pub input_size: Option<[usize; 2]>,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Preprocessing {
            resize: ResizePolicy::Stretch,
            layout: TensorLayout::Nchw,
            channel_order: ChannelOrder::Rgb,
            scale: 1.0,
            mean: Vec::new(),
            std: Vec::new(),
            output: OutputKind::Probabilities,
            input_size: None,
        }
    }
}

impl Preprocessing {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("preprocessing file {}: {e}", path.display()))
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if !(self.scale.is_finite() && self.scale != 0.0) {
            return Err(Error::Config(format!("invalid scale {}", self.scale)));
        }
        for (what, v) in [("mean", &self.mean), ("std", &self.std)] {
            if !v.is_empty() && v.len() != channels {
                return Err(Error::Config(format!(
                    "{what} has {} entries for a {channels}-channel input",
                    v.len()
                )));
            }
        }
        if self.std.iter().any(|s| !s.is_finite() || *s == 0.0) {
            return Err(Error::Config("std entries must be finite and non-zero".into()));
        }
        Ok(())
    }
}

type Plan = Arc<TypedRunnableModel>;

/// An ONNX classifier driven as a black box.
pub struct ClassifierModel {
    source: PathBuf,
    fingerprint: String,
    preprocessing: Preprocessing,
    input_shape: (usize, usize, usize),
    class_count: usize,
    output_name: String,
    layer_catalog: Vec<LayerInfo>,
    allow_non_spatial: bool,
    graph: InferenceModel,
    plans: Mutex<HashMap<Vec<String>, Plan>>,
}

impl fmt::Debug for ClassifierModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("source", &self.source)
            .field("input_shape", &self.input_shape)
            .field("class_count", &self.class_count)
            .field("layers", &self.layer_catalog.len())
            .finish()
    }
}

impl ClassifierModel {
    /// Reads and validates an ONNX file. The file is only read, never modified.
    pub fn load(source: &Path, preprocessing: Preprocessing) -> Result<Self> {
        if !source.is_file() {
            return Err(Error::ModelNotFound(source.to_path_buf()));
        }
        let bytes = std::fs::read(source).map_err(|e| Error::io(source, e))?;
        Self::from_bytes(source, &bytes, preprocessing)
    }

    /// Parses an in-memory ONNX model; `source` is only used in messages.
    pub fn from_bytes(source: &Path, bytes: &[u8], preprocessing: Preprocessing) -> Result<Self> {
        let format_err = |e: &dyn fmt::Display| Error::ModelFormat {
            path: source.to_path_buf(),
            reason: e.to_string(),
        };
        let mut graph = tract_onnx::onnx()
            .model_for_read(&mut &bytes[..])
            .map_err(|e| format_err(&format!("{e:#}")))?;

        if graph.inputs.len() != 1 {
            return Err(Error::InvalidModel(format!(
                "expected exactly one input, found {}",
                graph.inputs.len()
            )));
        }
        let Some(&output) = graph.outputs.first() else {
            return Err(Error::InvalidModel("network declares no output".into()));
        };
        let output_name = graph.node(output.node).name.clone();

        let input_dims = resolve_input_dims(&graph, &preprocessing)?;
        graph
            .set_input_fact(0, f32::fact(input_dims.clone()).into())
            .map_err(|e| format_err(&format!("{e:#}")))?;
        let input_shape = match preprocessing.layout {
            TensorLayout::Nchw => (input_dims[2], input_dims[3], input_dims[1]),
            TensorLayout::Nhwc => (input_dims[1], input_dims[2], input_dims[3]),
        };
        if input_shape.0 == 0 || input_shape.1 == 0 || input_shape.2 == 0 {
            return Err(Error::InvalidModel(format!(
                "input dimensions must be positive, got {input_dims:?}"
            )));
        }
        preprocessing.validate(input_shape.2)?;

        let layer_catalog = build_catalog(&graph, preprocessing.layout, &output_name)?;
        let class_count = layer_catalog
            .iter()
            .find(|l| l.name == output_name)
            .map(|l| l.dims.iter().skip(1).product::<usize>())
            .unwrap_or(0);
        if class_count < 2 {
            return Err(Error::InvalidModel(format!(
                "output `{output_name}` has {class_count} classes, need at least 2"
            )));
        }
        if !layer_catalog.iter().any(|l| l.is_spatial() && !l.is_input) {
            return Err(Error::InvalidModel(
                "network has no spatial layers to build hypercolumns from".into(),
            ));
        }

        Ok(ClassifierModel {
            source: source.to_path_buf(),
            fingerprint: hex_digest(bytes),
            preprocessing,
            input_shape,
            class_count,
            output_name,
            layer_catalog,
            allow_non_spatial: false,
            graph,
            plans: Mutex::new(HashMap::new()),
        })
    }

    /// Permits non-spatial layers in [`BlackBox::activations`]; they come back as 1x1 volumes.
    pub fn with_non_spatial_layers(mut self, allow: bool) -> Self {
        self.allow_non_spatial = allow;
        self
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    pub fn output_name(&self) -> &str {
        &self.output_name
    }

    /// The network input tensor for `image`, in the configured layout.
    pub fn preprocess(&self, image: &Image) -> Result<Tensor> {
        let (h, w, c) = self.input_shape;
        if image.channels() != c {
            return Err(Error::ShapeMismatch(format!(
                "image has {} channels, model expects {c}",
                image.channels()
            )));
        }
        let resized;
        let image = if (image.height(), image.width()) == (h, w) {
            image
        } else if self.preprocessing.resize == ResizePolicy::Stretch {
            resized = image.resized(h, w);
            &resized
        } else {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, model expects {h}x{w}",
                image.height(),
                image.width()
            )));
        };

        let p = &self.preprocessing;
        let value = |y: usize, x: usize, ch: usize| -> f32 {
            let src = match p.channel_order {
                ChannelOrder::Bgr if c == 3 => 2 - ch,
                _ => ch,
            };
            let mean = p.mean.get(ch).copied().unwrap_or(0.0);
            let std = p.std.get(ch).copied().unwrap_or(1.0);
            ((image.get(y, x, src) * p.scale - mean) / std) as f32
        };
        let array = match p.layout {
            TensorLayout::Nchw => {
                tract_ndarray::Array4::from_shape_fn((1, c, h, w), |(_, ch, y, x)| value(y, x, ch))
            }
            TensorLayout::Nhwc => {
                tract_ndarray::Array4::from_shape_fn((1, h, w, c), |(_, y, x, ch)| value(y, x, ch))
            }
        };
        Ok(array.into_tensor())
    }

    fn plan(&self, outputs: &[String]) -> Result<Plan> {
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        if let Some(plan) = plans.get(outputs) {
            return Ok(plan.clone());
        }
        let plan = self
            .graph
            .clone()
            .with_outputs_by_name(outputs.iter().map(String::as_str))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| Error::Inference(format!("{e:#}")))?;
        plans.insert(outputs.to_vec(), plan.clone());
        Ok(plan)
    }

    fn run(&self, image: &Image, outputs: &[String]) -> Result<TVec<TValue>> {
        let input = self.preprocess(image)?;
        let plan = self.plan(outputs)?;
        plan.run(tvec!(input.into()))
            .map_err(|e| Error::Inference(format!("{e:#}")))
    }

    fn to_prediction(&self, tensor: &Tensor) -> Result<PredictionVector> {
        let view = tensor
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Inference(format!("{e:#}")))?;
        if view.len() != self.class_count {
            return Err(Error::Inference(format!(
                "output has {} values, expected {}",
                view.len(),
                self.class_count
            )));
        }
        let raw: Vec<f64> = view.iter().map(|&v| f64::from(v)).collect();
        match self.preprocessing.output {
            OutputKind::Logits => PredictionVector::from_logits(&raw),
            OutputKind::Probabilities => PredictionVector::normalized(raw),
        }
    }

    /// Class probabilities and activations from a single forward pass.
    pub fn forward(
        &self,
        image: &Image,
        layers: &[String],
    ) -> Result<(PredictionVector, Vec<ActivationVolume>)> {
        let infos = self.resolve_layers(layers)?;
        let mut outputs = layers.to_vec();
        outputs.push(self.output_name.clone());
        let values = self.run(image, &outputs)?;
        let prediction = self.to_prediction(&values[layers.len()])?;
        let volumes = infos
            .iter()
            .zip(values.iter())
            .map(|(info, t)| self.to_volume(info, t))
            .collect::<Result<Vec<_>>>()?;
        Ok((prediction, volumes))
    }

    fn resolve_layers(&self, layers: &[String]) -> Result<Vec<&LayerInfo>> {
        layers
            .iter()
            .map(|name| {
                let info = self
                    .layer_catalog
                    .iter()
                    .find(|l| &l.name == name)
                    .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
                if !info.is_spatial() && !self.allow_non_spatial {
                    return Err(Error::NonSpatialLayer(name.clone()));
                }
                Ok(info)
            })
            .collect()
    }

    fn to_volume(&self, info: &LayerInfo, tensor: &Tensor) -> Result<ActivationVolume> {
        let view = tensor
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Inference(format!("{e:#}")))?;
        let dims = view.shape().to_vec();
        let data = if dims.len() == 4 {
            if dims[0] != 1 {
                return Err(Error::Inference(format!("batch size {} != 1", dims[0])));
            }
            match self.preprocessing.layout {
                TensorLayout::Nchw => Array3::from_shape_fn((dims[2], dims[3], dims[1]), |(y, x, c)| {
                    f64::from(view[[0, c, y, x]])
                }),
                TensorLayout::Nhwc => Array3::from_shape_fn((dims[1], dims[2], dims[3]), |(y, x, c)| {
                    f64::from(view[[0, y, x, c]])
                }),
            }
        } else {
            let flat: Vec<f64> = view.iter().map(|&v| f64::from(v)).collect();
            let n = flat.len();
            Array3::from_shape_vec((1, 1, n), flat).expect("length matches shape")
        };
        ActivationVolume::new(info.name.clone(), data, info.kind)
    }
}

impl BlackBox for ClassifierModel {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn layer_catalog(&self) -> &[LayerInfo] {
        &self.layer_catalog
    }

    fn predict(&self, image: &Image) -> Result<PredictionVector> {
        let values = self.run(image, std::slice::from_ref(&self.output_name))?;
        self.to_prediction(&values[0])
    }

    fn activations(&self, image: &Image, layers: &[String]) -> Result<Vec<ActivationVolume>> {
        let infos = self.resolve_layers(layers)?;
        let values = self.run(image, layers)?;
        infos
            .iter()
            .zip(values.iter())
            .map(|(info, t)| self.to_volume(info, t))
            .collect()
    }

    fn fingerprint(&self) -> Option<&str> {
        Some(&self.fingerprint)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn resolve_input_dims(graph: &InferenceModel, pre: &Preprocessing) -> Result<Vec<usize>> {
    let fact = graph
        .input_fact(0)
        .map_err(|e| Error::InvalidModel(format!("{e:#}")))?;
    let declared: Vec<Option<usize>> = match fact.shape.rank().concretize() {
        Some(4) => fact
            .shape
            .dims()
            .map(|d| d.concretize().and_then(|d| d.as_i64()).map(|d| d as usize))
            .collect(),
        _ => {
            return Err(Error::InvalidModel(
                "network input must be a rank-4 image tensor".into(),
            ))
        }
    };
    let (h_axis, w_axis, c_axis) = match pre.layout {
        TensorLayout::Nchw => (2, 3, 1),
        TensorLayout::Nhwc => (1, 2, 3),
    };
    let mut dims = vec![1usize; 4];
    if let Some(b) = declared[0] {
        if b != 1 {
            return Err(Error::InvalidModel(format!("fixed batch size {b} is not supported")));
        }
    }
    dims[c_axis] = declared[c_axis].ok_or_else(|| {
        Error::InvalidModel("network input has a symbolic channel dimension".into())
    })?;
    for (i, axis) in [h_axis, w_axis].into_iter().enumerate() {
        dims[axis] = match (declared[axis], pre.input_size) {
            (Some(d), Some(size)) if d != size[i] => {
                return Err(Error::Config(format!(
                    "input_size {:?} conflicts with the network's declared input",
                    size
                )))
            }
            (Some(d), _) => d,
            (None, Some(size)) => size[i],
            (None, None) => {
                return Err(Error::Config(
                    "network input size is symbolic; set input_size in the preprocessing descriptor"
                        .into(),
                ))
            }
        };
    }
    Ok(dims)
}

fn build_catalog(
    graph: &InferenceModel,
    layout: TensorLayout,
    output_name: &str,
) -> Result<Vec<LayerInfo>> {
    let input_node = graph.inputs[0].node;
    let candidates: Vec<(String, String, bool)> = graph
        .eval_order()
        .map_err(|e| Error::InvalidModel(format!("{e:#}")))?
        .into_iter()
        .map(|id| graph.node(id))
        .filter(|n| n.op().name() != "Const")
        .map(|n| (n.name.clone(), n.op().name().to_string(), n.id == input_node))
        .collect();

    let typed = graph
        .clone()
        .with_outputs_by_name(candidates.iter().map(|c| c.0.as_str()))
        .and_then(|m| m.into_typed())
        .map_err(|e| Error::InvalidModel(format!("{e:#}")))?;

    let mut catalog = Vec::new();
    for ((name, op, is_input), outlet) in candidates.into_iter().zip(typed.outputs.iter()) {
        let fact = typed
            .outlet_fact(*outlet)
            .map_err(|e| Error::InvalidModel(format!("{e:#}")))?;
        if fact.datum_type != f32::datum_type() {
            continue;
        }
        let Some(dims) = fact.shape.as_concrete().map(|d| d.to_vec()) else {
            continue;
        };
        let shape = if dims.len() == 4 {
            match layout {
                TensorLayout::Nchw => (dims[2], dims[3], dims[1]),
                TensorLayout::Nhwc => (dims[1], dims[2], dims[3]),
            }
        } else {
            (1, 1, dims.iter().skip(1).product())
        };
        let kind = if dims.len() == 4 && (shape.0 > 1 || shape.1 > 1) {
            LayerKind::Convolutional
        } else {
            LayerKind::Other
        };
        catalog.push(LayerInfo {
            name,
            op,
            dims,
            shape,
            kind,
            is_input,
        });
    }
    if !catalog.iter().any(|l| l.name == output_name) {
        return Err(Error::InvalidModel(format!(
            "output `{output_name}` is not a float tensor of known shape"
        )));
    }
    Ok(catalog)
}
