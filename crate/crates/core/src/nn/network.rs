use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::{LayerKind, LayerSpec};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::train::init::xavier_uniform;

/// Where a plugin output is fused into the base network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Pre-activation output of a dense layer; one value per unit.
    LinearPreactivation,
    /// Output of a (transposed) convolution; one value per channel.
    ConvChannelwise,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttachmentPoint {
    pub layer_id: String,
    pub site: Site,
    pub width: usize,
}

/// A feed-forward network built from an ordered list of [`LayerSpec`]s.
///
/// Once frozen, parameters can be read and evaluated but never mutated;
/// [`BaseNetwork::params_mut`] returns [`Error::Frozen`].
pub struct BaseNetwork<T: Scalar = f32> {
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    input_shape: Vec<usize>,
    frozen: bool,
    layer_calls: AtomicUsize,
}

/// Parameters of a network recorded on a tape, one list per layer.
pub struct BoundNetwork<'t, T: Scalar> {
    params: Vec<Vec<Var<'t, T>>>,
}

impl<'t, T: Scalar> BoundNetwork<'t, T> {
    /// All parameter vars in storage order.
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.params.iter().flatten().copied().collect()
    }
}

/// Output shape of every layer; rejects empty specs, duplicate ids and
/// layers that cannot accept their predecessor's output.
pub fn infer_shapes(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("network needs at least one layer".into()));
    }
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::InvalidShape(format!("input shape {input_shape:?}")));
    }
    let mut seen = HashSet::new();
    let mut shapes = Vec::with_capacity(layers.len());
    let mut current = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        if !seen.insert(layer.id.as_str()) {
            return Err(Error::DuplicateLayer(layer.id.clone()));
        }
        current = layer.output_shape(&current).ok_or_else(|| {
            let prev = if i == 0 { "input" } else { layers[i - 1].id.as_str() };
            Error::LayerChain(prev.to_string(), layer.id.clone())
        })?;
        shapes.push(current.clone());
    }
    Ok(shapes)
}

impl<T: Scalar> BaseNetwork<T> {
    /// Builds a network with Xavier-uniform weights and zero biases.
    pub fn build(layers: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<Self> {
        let shapes = infer_shapes(&layers, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.len());
        for layer in &layers {
            let mut tensors = Vec::new();
            for p in layer.param_shapes() {
                let t = if p.is_bias {
                    Tensor::zeros(&p.shape)?
                } else {
                    xavier_uniform(&p.shape, p.fan_in, p.fan_out, &mut rng)?
                };
                tensors.push(t.with_requires_grad(true));
            }
            params.push(tensors);
        }
        Ok(Self {
            layers,
            params,
            shapes,
            input_shape: input_shape.to_vec(),
            frozen: false,
            layer_calls: AtomicUsize::new(0),
        })
    }

    /// Assembles a network from explicit parameters (weight then bias per
    /// layer, in layer order).
    pub fn from_parts(layers: Vec<LayerSpec>, input_shape: &[usize], flat: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = infer_shapes(&layers, input_shape)?;
        let mut flat = flat.into_iter();
        let mut params = Vec::with_capacity(layers.len());
        for layer in &layers {
            let mut tensors = Vec::new();
            for p in layer.param_shapes() {
                let t = flat
                    .next()
                    .ok_or_else(|| Error::InvalidArgument(format!("missing {}.{}", layer.id, p.name)))?;
                if t.shape() != p.shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "from_parts",
                        left: p.shape.clone(),
                        right: t.shape().to_vec(),
                    });
                }
                tensors.push(t.with_requires_grad(true));
            }
            params.push(tensors);
        }
        if flat.next().is_some() {
            return Err(Error::InvalidArgument("more parameter tensors than layers need".into()));
        }
        Ok(Self {
            layers,
            params,
            shapes,
            input_shape: input_shape.to_vec(),
            frozen: false,
            layer_calls: AtomicUsize::new(0),
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("nonempty network")
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Output shape of layer `index`.
    pub fn layer_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    /// `(name, tensor)` pairs in storage order, named `<layer>.<weight|bias>`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .zip(&self.params)
            .flat_map(|(l, ps)| {
                l.param_shapes()
                    .into_iter()
                    .zip(ps)
                    .map(move |(s, t)| (format!("{}.{}", l.id, s.name), t))
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.params.iter().flatten().collect()
    }

    pub fn params_mut(&mut self) -> Result<Vec<&mut Tensor<T>>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(self.params.iter_mut().flatten().collect())
    }

    /// Replaces every parameter value, keeping shapes.
    pub fn set_params(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let slots = self.params_mut()?;
        if slots.len() != values.len() {
            return Err(Error::LengthMismatch {
                expected: slots.len(),
                actual: values.len(),
            });
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_params",
                    left: slot.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            *slot = v.clone().with_requires_grad(true);
        }
        Ok(())
    }

    /// Number of layer evaluations since construction or the last reset.
    pub fn layer_calls(&self) -> usize {
        self.layer_calls.load(Ordering::Relaxed)
    }

    pub fn reset_layer_calls(&self) {
        self.layer_calls.store(0, Ordering::Relaxed);
    }

    /// Attachment point at a dense or convolutional layer.
    pub fn attachment_point(&self, layer_id: &str) -> Result<AttachmentPoint> {
        let i = self
            .layer_index(layer_id)
            .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))?;
        let (site, width) = match &self.layers[i].kind {
            LayerKind::Dense { outputs, .. } => (Site::LinearPreactivation, *outputs),
            LayerKind::Conv2d { out_channels, .. } | LayerKind::Conv2dTransposed { out_channels, .. } => {
                (Site::ConvChannelwise, *out_channels)
            }
            _ => {
                return Err(Error::InvalidAttachment {
                    layer: layer_id.to_string(),
                    reason: "only dense and convolutional layers expose pre-activations".into(),
                })
            }
        };
        Ok(AttachmentPoint {
            layer_id: layer_id.to_string(),
            site,
            width,
        })
    }

    /// Checks `point` against this network and returns its layer index.
    pub fn validate_point(&self, point: &AttachmentPoint) -> Result<usize> {
        let expected = self.attachment_point(&point.layer_id)?;
        if expected.site != point.site {
            return Err(Error::InvalidAttachment {
                layer: point.layer_id.clone(),
                reason: format!("site {:?} does not match layer kind", point.site),
            });
        }
        if expected.width != point.width {
            return Err(Error::InvalidAttachment {
                layer: point.layer_id.clone(),
                reason: format!("width {} but layer has {}", point.width, expected.width),
            });
        }
        Ok(self.layer_index(&point.layer_id).expect("validated"))
    }

    /// Records the parameters on `tape`; they are tracked only when the
    /// network is not frozen.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundNetwork<'t, T> {
        let trainable = !self.frozen;
        BoundNetwork {
            params: self
                .params
                .iter()
                .map(|ps| ps.iter().map(|p| tape.leaf(p, trainable && p.requires_grad())).collect())
                .collect(),
        }
    }

    /// Runs layers `range` starting from `input`. After each layer, `hook`
    /// sees the layer index and output and may replace the output.
    pub fn run_layers<'t>(
        &self,
        bound: &BoundNetwork<'t, T>,
        range: Range<usize>,
        input: Var<'t, T>,
        hook: &mut dyn FnMut(usize, Var<'t, T>) -> Result<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let expected = if range.start == 0 {
            self.input_shape.as_slice()
        } else {
            self.shapes[range.start - 1].as_slice()
        };
        if input.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: expected.to_vec(),
                right: input.shape(),
            });
        }
        let mut x = input;
        for i in range {
            self.layer_calls.fetch_add(1, Ordering::Relaxed);
            let p = &bound.params[i];
            x = match &self.layers[i].kind {
                LayerKind::Dense { .. } => x.linear(p[0], Some(p[1]))?,
                LayerKind::Conv2d { stride, padding, .. } => x.conv2d(p[0], Some(p[1]), *stride, *padding)?,
                LayerKind::Conv2dTransposed { stride, padding, .. } => {
                    x.conv_transpose2d(p[0], *stride, *padding)?.channel_add(p[1])?
                }
                LayerKind::Maxpool2d { kernel: [kh, kw] } => x.max_pool2d(*kh, *kw)?,
                LayerKind::Flatten => x.flatten(),
                LayerKind::Activation { activation } => x.activation(*activation),
            };
            x = hook(i, x)?;
        }
        Ok(x)
    }

    /// Full forward pass on `tape`.
    pub fn record<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<(Var<'t, T>, BoundNetwork<'t, T>)> {
        let bound = self.bind(tape);
        let out = self.run_layers(&bound, 0..self.layers.len(), x, &mut |_, v| Ok(v))?;
        Ok((out, bound))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let (out, _) = self.record(&tape, tape.constant(x))?;
        Ok(out.value())
    }

    /// Forward pass that also returns the pre-activation output at each
    /// requested attachment point. Capturing never changes the output.
    pub fn forward_base(
        &self,
        x: &Tensor<T>,
        capture: &[AttachmentPoint],
    ) -> Result<(Tensor<T>, BTreeMap<String, Tensor<T>>)> {
        let mut wanted = BTreeMap::new();
        for p in capture {
            wanted.insert(self.validate_point(p)?, p.layer_id.clone());
        }
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let mut captured = BTreeMap::new();
        let out = self.run_layers(&bound, 0..self.layers.len(), tape.constant(x), &mut |i, v| {
            if let Some(id) = wanted.get(&i) {
                captured.insert(id.clone(), v.value());
            }
            Ok(v)
        })?;
        Ok((out.value(), captured))
    }

    pub fn cast<U: Scalar>(&self) -> BaseNetwork<U> {
        BaseNetwork {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|ps| ps.iter().map(Tensor::cast).collect())
                .collect(),
            shapes: self.shapes.clone(),
            input_shape: self.input_shape.clone(),
            frozen: self.frozen,
            layer_calls: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> Clone for BaseNetwork<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            params: self.params.clone(),
            shapes: self.shapes.clone(),
            input_shape: self.input_shape.clone(),
            frozen: self.frozen,
            layer_calls: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for BaseNetwork<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BaseNetwork")
            .field("layers", &self.layers.iter().map(|l| &l.id).collect::<Vec<_>>())
            .field("input_shape", &self.input_shape)
            .field("output_shape", &self.output_shape())
            .field("params", &self.param_count())
            .field("frozen", &self.frozen)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense("d1", 8, 16),
            LayerSpec::relu("r1"),
            LayerSpec::dense("d2", 16, 4),
        ]
    }

    #[test]
    fn parameter_count() {
        let net = BaseNetwork::<f32>::build(mlp(), &[8], 0).unwrap();
        assert_eq!(net.param_count(), 8 * 16 + 16 + 16 * 4 + 4);
        assert_eq!(net.param_count(), 212);
        assert!(!net.is_frozen());
    }

    #[test]
    fn conv_flatten_dense_chain() {
        let layers = vec![
            LayerSpec::conv2d("c1", 1, 4, [3, 3], 1, 1),
            LayerSpec::relu("r1"),
            LayerSpec::flatten("flat"),
            LayerSpec::dense("out", 256, 2),
        ];
        let net = BaseNetwork::<f32>::build(layers, &[1, 8, 8], 0).unwrap();
        assert_eq!(net.layer_shape(2), &[4 * 8 * 8]);
        assert_eq!(net.output_dim(), 2);
    }

    #[test]
    fn chain_break_names_both_layers() {
        let layers = vec![LayerSpec::dense("d1", 8, 16), LayerSpec::dense("d2", 8, 4)];
        let err = BaseNetwork::<f32>::build(layers, &[8], 0).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch between d1 and d2");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let layers = vec![LayerSpec::dense("d", 8, 8), LayerSpec::dense("d", 8, 4)];
        assert!(matches!(
            BaseNetwork::<f32>::build(layers, &[8], 0),
            Err(Error::DuplicateLayer(_))
        ));
    }

    #[test]
    fn zero_weight_capture_equals_bias() {
        let mut net = BaseNetwork::<f32>::build(mlp(), &[8], 1).unwrap();
        {
            let mut ps = net.params_mut().unwrap();
            let (w, rest) = ps.split_at_mut(1);
            w[0].values_mut().fill(0.0);
            rest[0].values_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        }
        let x = Tensor::new(&[8], vec![1.5; 8]).unwrap();
        let point = net.attachment_point("d1").unwrap();
        let (_, captured) = net.forward_base(&x, &[point]).unwrap();
        let expected: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(captured["d1"].values(), expected.as_slice());
    }

    #[test]
    fn capture_is_observation_only() {
        let net = BaseNetwork::<f32>::build(mlp(), &[8], 2).unwrap();
        let x = Tensor::new(&[8], (0..8).map(|i| i as f32 * 0.1).collect()).unwrap();
        let plain = net.forward(&x).unwrap();
        let points = [net.attachment_point("d1").unwrap(), net.attachment_point("d2").unwrap()];
        let (out, captured) = net.forward_base(&x, &points).unwrap();
        assert!(out.bit_eq(&plain));
        assert_eq!(captured.len(), 2);
        let (empty_out, none) = net.forward_base(&x, &[]).unwrap();
        assert!(empty_out.bit_eq(&plain));
        assert!(none.is_empty());
    }

    #[test]
    fn conv_capture_shape_matches_width() {
        let layers = vec![
            LayerSpec::conv2d("c1", 1, 3, [3, 3], 1, 0),
            LayerSpec::relu("r"),
            LayerSpec::flatten("f"),
            LayerSpec::dense("o", 3 * 4 * 4, 2),
        ];
        let net = BaseNetwork::<f32>::build(layers, &[1, 6, 6], 0).unwrap();
        let p = net.attachment_point("c1").unwrap();
        assert_eq!(p.site, Site::ConvChannelwise);
        let (_, cap) = net.forward_base(&Tensor::full(&[1, 6, 6], 0.5).unwrap(), std::slice::from_ref(&p)).unwrap();
        assert_eq!(cap["c1"].shape(), &[p.width, 4, 4]);
    }

    #[test]
    fn unknown_capture_layer_rejected() {
        let net = BaseNetwork::<f32>::build(mlp(), &[8], 0).unwrap();
        let bogus = AttachmentPoint {
            layer_id: "nope".into(),
            site: Site::LinearPreactivation,
            width: 4,
        };
        let x = Tensor::zeros(&[8]).unwrap();
        assert!(matches!(net.forward_base(&x, &[bogus]), Err(Error::UnknownLayer(_))));
        assert!(net.attachment_point("r1").is_err());
    }

    #[test]
    fn frozen_network_refuses_mutation() {
        let mut net = BaseNetwork::<f32>::build(mlp(), &[8], 0).unwrap();
        net.freeze();
        assert!(matches!(net.params_mut(), Err(Error::Frozen)));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = BaseNetwork::<f32>::build(mlp(), &[8], 5).unwrap();
        let x = Tensor::new(&[8], (0..8).map(|i| (i as f32).sin()).collect()).unwrap();
        assert!(net.forward(&x).unwrap().bit_eq(&net.forward(&x).unwrap()));
    }
}
