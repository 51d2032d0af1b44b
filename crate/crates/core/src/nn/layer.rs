use serde::{Deserialize, Serialize};

use crate::tensor::ActivationKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    },
    Conv2dTransposed {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    },
    Maxpool2d {
        kernel: [usize; 2],
    },
    Flatten,
    Activation {
        activation: ActivationKind,
    },
}

/// One layer of a network. Activations are separate layers, so a dense or
/// convolutional layer's output is always its pre-activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Shape, Xavier fans, and role of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
}

impl LayerSpec {
    pub fn dense(id: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Dense { inputs, outputs },
        }
    }

    pub fn conv2d(
        id: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
        }
    }

    pub fn conv2d_transposed(
        id: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Conv2dTransposed {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
        }
    }

    pub fn maxpool2d(id: impl Into<String>, kernel: [usize; 2]) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Maxpool2d { kernel },
        }
    }

    pub fn flatten(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Flatten,
        }
    }

    pub fn activation(id: impl Into<String>, activation: ActivationKind) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Activation { activation },
        }
    }

    pub fn relu(id: impl Into<String>) -> Self {
        Self::activation(id, ActivationKind::Relu)
    }

    pub fn is_conv(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv2d { .. } | LayerKind::Conv2dTransposed { .. }
        )
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. })
    }

    /// Output shape for `input`, or `None` when the layer cannot accept it.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match &self.kind {
            LayerKind::Dense { inputs, outputs } => {
                (input == [*inputs] && *outputs > 0).then(|| vec![*outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                stride,
                padding,
            } => {
                let [c, h, w] = *input else { return None };
                if c != *in_channels
                    || *stride == 0
                    || *out_channels == 0
                    || *kh == 0
                    || *kw == 0
                    || *kh > h + 2 * padding
                    || *kw > w + 2 * padding
                {
                    return None;
                }
                Some(vec![
                    *out_channels,
                    (h + 2 * padding - kh) / stride + 1,
                    (w + 2 * padding - kw) / stride + 1,
                ])
            }
            LayerKind::Conv2dTransposed {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                stride,
                padding,
            } => {
                let [c, h, w] = *input else { return None };
                if c != *in_channels || *stride == 0 || *out_channels == 0 {
                    return None;
                }
                let oh = (h - 1) * stride + kh;
                let ow = (w - 1) * stride + kw;
                (oh > 2 * padding && ow > 2 * padding)
                    .then(|| vec![*out_channels, oh - 2 * padding, ow - 2 * padding])
            }
            LayerKind::Maxpool2d { kernel: [kh, kw] } => {
                let [c, h, w] = *input else { return None };
                (*kh > 0 && *kw > 0 && *kh <= h && *kw <= w).then(|| vec![c, h / kh, w / kw])
            }
            LayerKind::Flatten => (!input.is_empty()).then(|| vec![input.iter().product()]),
            LayerKind::Activation { .. } => (!input.is_empty()).then(|| input.to_vec()),
        }
    }

    /// Parameter tensors in storage order: weight, then bias.
    pub fn param_shapes(&self) -> Vec<ParamShape> {
        match &self.kind {
            LayerKind::Dense { inputs, outputs } => vec![
                ParamShape {
                    name: "weight",
                    shape: vec![*outputs, *inputs],
                    fan_in: *inputs,
                    fan_out: *outputs,
                    is_bias: false,
                },
                bias(*outputs),
            ],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                ..
            } => vec![
                ParamShape {
                    name: "weight",
                    shape: vec![*out_channels, *in_channels, *kh, *kw],
                    fan_in: in_channels * kh * kw,
                    fan_out: out_channels * kh * kw,
                    is_bias: false,
                },
                bias(*out_channels),
            ],
            LayerKind::Conv2dTransposed {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                ..
            } => vec![
                ParamShape {
                    name: "weight",
                    shape: vec![*in_channels, *out_channels, *kh, *kw],
                    fan_in: in_channels * kh * kw,
                    fan_out: out_channels * kh * kw,
                    is_bias: false,
                },
                bias(*out_channels),
            ],
            _ => Vec::new(),
        }
    }
}

fn bias(n: usize) -> ParamShape {
    ParamShape {
        name: "bias",
        shape: vec![n],
        fan_in: 0,
        fan_out: n,
        is_bias: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_same_padding_keeps_size() {
        let l = LayerSpec::conv2d("c", 1, 4, [3, 3], 1, 1);
        assert_eq!(l.output_shape(&[1, 8, 8]), Some(vec![4, 8, 8]));
        assert_eq!(l.output_shape(&[2, 8, 8]), None);
    }

    #[test]
    fn transposed_output_size() {
        let l = LayerSpec::conv2d_transposed("d", 8, 6, [4, 4], 2, 1);
        assert_eq!(l.output_shape(&[8, 8, 8]), Some(vec![6, 16, 16]));
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let layers = vec![
            LayerSpec::conv2d("c1", 1, 4, [3, 3], 1, 1),
            LayerSpec::relu("r1"),
            LayerSpec::maxpool2d("p", [2, 2]),
            LayerSpec::flatten("f"),
            LayerSpec::dense("d", 64, 2),
        ];
        let text = serde_json::to_string(&layers).unwrap();
        let back: Vec<LayerSpec> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, layers);
    }
}
