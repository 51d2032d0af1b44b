//! Small reference architectures.
//!
//! `toy-cls` is a two-conv, one-pool, three-dense classifier. `toy-fcn` is a
//! three-conv, two-deconv fully convolutional segmenter whose output is a
//! `[classes, H, W]` logit map.

use crate::error::{Error, Result};
use crate::nn::layer::LayerSpec;

pub const TOY_CLS: &str = "toy-cls";
pub const TOY_FCN: &str = "toy-fcn";

const CONV_CHANNELS: usize = 8;
const DENSE_HIDDEN: usize = 32;

/// Layer list for a named architecture.
pub fn by_name(name: &str, input_shape: &[usize], outputs: usize) -> Result<Vec<LayerSpec>> {
    match name {
        TOY_CLS => toy_cls(input_shape, outputs),
        TOY_FCN => toy_fcn(input_shape, outputs),
        other => Err(Error::Config(format!("unknown architecture {other:?}"))),
    }
}

/// Classifier over `[C, H, W]` inputs. Kernels shrink to fit thin inputs, so
/// a `[1, 1, d]` vector becomes a 1-D convolution.
pub fn toy_cls(input_shape: &[usize], outputs: usize) -> Result<Vec<LayerSpec>> {
    let &[c, h, w] = input_shape else {
        return Err(Error::InvalidShape(format!("toy-cls needs [C, H, W], got {input_shape:?}")));
    };
    if outputs == 0 {
        return Err(Error::InvalidArgument("toy-cls needs at least one output".into()));
    }
    let kernel = [h.min(3), w.min(3)];
    let pad = |n: usize| usize::from(n >= 3);
    let padding = pad(h).min(pad(w));
    let conv_out = |n: usize, k: usize| n + 2 * padding - k + 1;
    let (h1, w1) = (conv_out(h, kernel[0]), conv_out(w, kernel[1]));
    let (h2, w2) = (conv_out(h1, kernel[0]), conv_out(w1, kernel[1]));
    let pool = [h2.min(2), w2.min(2)];
    let flat = CONV_CHANNELS * (h2 / pool[0]) * (w2 / pool[1]);
    Ok(vec![
        LayerSpec::conv2d("conv1", c, CONV_CHANNELS, kernel, 1, padding),
        LayerSpec::relu("relu1"),
        LayerSpec::conv2d("conv2", CONV_CHANNELS, CONV_CHANNELS, kernel, 1, padding),
        LayerSpec::relu("relu2"),
        LayerSpec::maxpool2d("pool", pool),
        LayerSpec::flatten("flatten"),
        LayerSpec::dense("fc1", flat, DENSE_HIDDEN),
        LayerSpec::relu("relu3"),
        LayerSpec::dense("fc2", DENSE_HIDDEN, DENSE_HIDDEN),
        LayerSpec::relu("relu4"),
        LayerSpec::dense("fc3", DENSE_HIDDEN, outputs),
    ])
}

/// Segmenter for `[C, H, W]` inputs with `H` and `W` divisible by 2; emits
/// `[classes, H, W]` logits.
pub fn toy_fcn(input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    let &[c, h, w] = input_shape else {
        return Err(Error::InvalidShape(format!("toy-fcn needs [C, H, W], got {input_shape:?}")));
    };
    if h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "toy-fcn needs even spatial dims of at least 4, got {h}x{w}"
        )));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("toy-fcn needs at least two classes".into()));
    }
    let k = CONV_CHANNELS;
    Ok(vec![
        LayerSpec::conv2d("conv1", c, k, [3, 3], 1, 1),
        LayerSpec::relu("relu1"),
        LayerSpec::conv2d("conv2", k, k, [3, 3], 2, 1),
        LayerSpec::relu("relu2"),
        LayerSpec::conv2d("conv3", k, k, [3, 3], 1, 1),
        LayerSpec::relu("relu3"),
        LayerSpec::conv2d_transposed("deconv1", k, k, [3, 3], 1, 1),
        LayerSpec::relu("relu4"),
        LayerSpec::conv2d_transposed("deconv2", k, classes, [4, 4], 2, 1),
    ])
}

/// Ids of the convolutional layers in an architecture, in order.
pub fn conv_ids(layers: &[LayerSpec]) -> Vec<String> {
    layers
        .iter()
        .filter(|l| matches!(l.kind, crate::nn::layer::LayerKind::Conv2d { .. }))
        .map(|l| l.id.clone())
        .collect()
}

/// Ids of the transposed convolutional layers in an architecture, in order.
pub fn deconv_ids(layers: &[LayerSpec]) -> Vec<String> {
    layers
        .iter()
        .filter(|l| matches!(l.kind, crate::nn::layer::LayerKind::Conv2dTransposed { .. }))
        .map(|l| l.id.clone())
        .collect()
}

/// Ids of the dense layers in an architecture, in order.
pub fn dense_ids(layers: &[LayerSpec]) -> Vec<String> {
    layers
        .iter()
        .filter(|l| matches!(l.kind, crate::nn::layer::LayerKind::Dense { .. }))
        .map(|l| l.id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::infer_shapes;

    #[test]
    fn toy_cls_on_image() {
        let layers = toy_cls(&[1, 8, 8], 20).unwrap();
        let shapes = infer_shapes(&layers, &[1, 8, 8]).unwrap();
        assert_eq!(shapes[4], vec![8, 4, 4]);
        assert_eq!(shapes.last().unwrap(), &vec![20]);
    }

    #[test]
    fn toy_cls_on_vector() {
        let layers = toy_cls(&[1, 1, 8], 16).unwrap();
        let shapes = infer_shapes(&layers, &[1, 1, 8]).unwrap();
        assert_eq!(shapes[2], vec![8, 1, 4]);
        assert_eq!(shapes[5], vec![16]);
        assert_eq!(shapes.last().unwrap(), &vec![16]);
    }

    #[test]
    fn toy_fcn_restores_resolution() {
        let layers = toy_fcn(&[1, 16, 16], 6).unwrap();
        let shapes = infer_shapes(&layers, &[1, 16, 16]).unwrap();
        assert_eq!(shapes[2], vec![8, 8, 8]);
        assert_eq!(shapes.last().unwrap(), &vec![6, 16, 16]);
        assert_eq!(conv_ids(&layers), ["conv1", "conv2", "conv3"]);
        assert_eq!(deconv_ids(&layers), ["deconv1", "deconv2"]);
    }

    #[test]
    fn unknown_architecture() {
        assert!(by_name("resnet", &[1, 8, 8], 2).is_err());
    }
}
