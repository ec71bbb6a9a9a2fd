//! Small fixed-weight ONNX networks for demos, smoke tests and integration tests.
//!
//! The networks are emitted directly as ONNX protobuf, so no external tooling is
//! needed to produce them. Weights are public so that tests can run an
//! independent forward pass against the same numbers.

use prost::Message;
use tract_onnx::pb;

use crate::image::Image;

/// One 3x3, stride-1, zero-padded convolution, optionally followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Row-major `(out, in, 3, 3)`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub relu: bool,
}

impl ConvSpec {
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }
}

/// A stack of convolutions followed by global average pooling and softmax.
///
/// Node names: `input`, `convN`, `reluN`, `gap`, `flatten`, `prob`.
#[derive(Debug, Clone)]
pub struct ConvNet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub convs: Vec<ConvSpec>,
}

impl ConvNet {
    pub fn class_count(&self) -> usize {
        self.convs.last().map(|c| c.out_channels).unwrap_or(0)
    }

    pub fn to_onnx(&self) -> Vec<u8> {
        let mut nodes = Vec::new();
        let mut inits = Vec::new();
        let mut prev = "input".to_string();
        for conv in &self.convs {
            let (w, b) = (format!("{}.weight", conv.name), format!("{}.bias", conv.name));
            inits.push(tensor(
                &w,
                &[conv.out_channels, conv.in_channels, 3, 3],
                conv.weights.clone(),
            ));
            inits.push(tensor(&b, &[conv.out_channels], conv.bias.clone()));
            nodes.push(node(
                &conv.name,
                "Conv",
                &[&prev, &w, &b],
                vec![ints("kernel_shape", &[3, 3]), ints("pads", &[1, 1, 1, 1])],
            ));
            prev = conv.name.clone();
            if conv.relu {
                let relu = conv.name.replace("conv", "relu");
                nodes.push(node(&relu, "Relu", &[&prev], vec![]));
                prev = relu;
            }
        }
        nodes.push(node("gap", "GlobalAveragePool", &[&prev], vec![]));
        nodes.push(node("flatten", "Flatten", &["gap"], vec![]));
        nodes.push(node("prob", "Softmax", &["flatten"], vec![]));

        let graph = pb::GraphProto {
            name: "convnet".into(),
            node: nodes,
            initializer: inits,
            input: vec![value_info(
                "input",
                &[1, self.channels, self.height, self.width],
            )],
            output: vec![value_info("prob", &[1, self.class_count()])],
            ..Default::default()
        };
        pb::ModelProto {
            ir_version: 7,
            producer_name: "boxlens".into(),
            opset_import: vec![pb::OperatorSetIdProto {
                domain: String::new(),
                version: 13,
            }],
            graph: Some(graph),
            ..Default::default()
        }
        .encode_to_vec()
    }
}

/// Three-layer network over 8x8 grayscale input with four classes.
///
/// Class 0 responds to fine texture (a high-pass filter), class 1 to overall
/// brightness, class 2 carries a constant bias and class 3 is the baseline.
/// Expects inputs scaled to [0, 1] (preprocessing `scale = 1/255`).
pub fn tiny_cnn() -> ConvNet {
    let high_pass = [0.0, -0.25, 0.0, -0.25, 1.0, -0.25, 0.0, -0.25, 0.0];
    let mean = [1.0 / 9.0; 9];
    let centre = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let zero = [0.0; 9];

    let stack = |kernels: &[[f32; 9]]| kernels.iter().flatten().copied().collect::<Vec<f32>>();
    let scaled = |k: [f32; 9], s: f32| k.map(|v| v * s);

    ConvNet {
        height: 8,
        width: 8,
        channels: 1,
        convs: vec![
            ConvSpec {
                name: "conv1".into(),
                in_channels: 1,
                out_channels: 2,
                weights: stack(&[high_pass, mean]),
                bias: vec![0.0, 0.0],
                relu: true,
            },
            ConvSpec {
                name: "conv2".into(),
                in_channels: 2,
                out_channels: 3,
                weights: stack(&[centre, zero, zero, centre, mean, zero]),
                bias: vec![0.0, 0.0, 0.0],
                relu: true,
            },
            ConvSpec {
                name: "conv3".into(),
                in_channels: 3,
                out_channels: 4,
                weights: stack(&[
                    scaled(centre, 12.0),
                    zero,
                    scaled(centre, 8.0),
                    zero,
                    scaled(centre, 4.0),
                    zero,
                    zero,
                    zero,
                    zero,
                    zero,
                    zero,
                    zero,
                ]),
                bias: vec![0.0, 0.0, 1.0, 0.0],
                relu: false,
            },
        ],
    }
}

/// One convolution with an asymmetric kernel and two output channels.
pub fn single_conv() -> ConvNet {
    let kernel: Vec<f32> = (1..=9).map(|v| v as f32).collect();
    let mut weights = kernel.clone();
    weights.extend(kernel.iter().map(|v| -v));
    ConvNet {
        height: 5,
        width: 5,
        channels: 1,
        convs: vec![ConvSpec {
            name: "conv1".into(),
            in_channels: 1,
            out_channels: 2,
            weights,
            bias: vec![0.0, 0.0],
            relu: false,
        }],
    }
}

/// 8x8 grayscale image: a 0/255 checkerboard in the top-left 4x4 quadrant,
/// black elsewhere. Under [`tiny_cnn`] all class-0 evidence sits in that quadrant.
pub fn textured_quadrant_image() -> Image {
    Image::from_fn(8, 8, 1, |y, x, _| {
        if y < 4 && x < 4 && (y + x) % 2 == 0 {
            255.0
        } else {
            0.0
        }
    })
}

fn tensor(name: &str, dims: &[usize], data: Vec<f32>) -> pb::TensorProto {
    pb::TensorProto {
        name: name.into(),
        dims: dims.iter().map(|&d| d as i64).collect(),
        data_type: pb::tensor_proto::DataType::Float as i32,
        float_data: data,
        ..Default::default()
    }
}

fn value_info(name: &str, dims: &[usize]) -> pb::ValueInfoProto {
    use pb::tensor_shape_proto::{dimension::Value, Dimension};
    let shape = pb::TensorShapeProto {
        dim: dims
            .iter()
            .map(|&d| Dimension {
                value: Some(Value::DimValue(d as i64)),
                ..Default::default()
            })
            .collect(),
    };
    pb::ValueInfoProto {
        name: name.into(),
        r#type: Some(pb::TypeProto {
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: pb::tensor_proto::DataType::Float as i32,
                shape: Some(shape),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn ints(name: &str, values: &[i64]) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: pb::attribute_proto::AttributeType::Ints as i32,
        ints: values.to_vec(),
        ..Default::default()
    }
}

fn node(name: &str, op: &str, inputs: &[&str], attribute: Vec<pb::AttributeProto>) -> pb::NodeProto {
    pb::NodeProto {
        name: name.into(),
        op_type: op.into(),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![name.into()],
        attribute,
        ..Default::default()
    }
}
