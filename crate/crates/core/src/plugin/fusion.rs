use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttachmentPoint, Site};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// How a plugin output `r` is combined with a pre-activation `z`.
///
/// | operator | result |
/// |---|---|
/// | additive | `z + r` |
/// | affine | `r_a * z + r_b`, with `r = r_a ++ r_b` |
/// | multiplicative | `z * r` |
/// | residual | `z + z * r` |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOperator {
    Additive,
    Affine,
    Multiplicative,
    Residual,
}

impl FusionOperator {
    pub const ALL: [FusionOperator; 4] = [Self::Additive, Self::Affine, Self::Multiplicative, Self::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Self::Additive => "additive",
            Self::Affine => "affine",
            Self::Multiplicative => "multiplicative",
            Self::Residual => "residual",
        }
    }

    /// Plugin outputs needed per unit (or channel) of the attachment.
    pub fn multiplier(self) -> usize {
        if self == Self::Affine {
            2
        } else {
            1
        }
    }

    /// The `r` that leaves every `z` unchanged.
    pub fn identity<T: Scalar>(self, width: usize) -> Result<Tensor<T>> {
        let values = match self {
            Self::Additive | Self::Residual => vec![T::zero(); width],
            Self::Multiplicative => vec![T::one(); width],
            Self::Affine => {
                let mut v = vec![T::one(); width];
                v.resize(2 * width, T::zero());
                v
            }
        };
        Tensor::vector(values)
    }
}

impl fmt::Display for FusionOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion operator {s:?}")))
    }
}

/// Width of the plugin output for `op` at `point`: one value per unit or
/// channel, two for affine.
pub fn required_output_dim(point: &AttachmentPoint, op: FusionOperator) -> usize {
    point.width * op.multiplier()
}

fn check_width<T: Scalar>(width: usize, r: &Var<'_, T>, op: FusionOperator) -> Result<()> {
    let expected = width * op.multiplier();
    if r.shape().len() != 1 || r.len() != expected {
        return Err(Error::FusionWidth {
            op: op.name(),
            expected,
            actual: r.len(),
        });
    }
    Ok(())
}

/// Fuses `r` into a dense pre-activation `z` of shape `[n]`.
pub fn fuse_linear_var<'t, T: Scalar>(z: Var<'t, T>, r: Var<'t, T>, op: FusionOperator) -> Result<Var<'t, T>> {
    let shape = z.shape();
    if shape.len() != 1 {
        return Err(Error::InvalidShape(format!("linear fusion expects [n], got {shape:?}")));
    }
    let n = shape[0];
    check_width(n, &r, op)?;
    match op {
        FusionOperator::Additive => z.add(r),
        FusionOperator::Multiplicative => z.mul(r),
        FusionOperator::Residual => z.add(z.mul(r)?),
        FusionOperator::Affine => r.slice(0, n)?.mul(z)?.add(r.slice(n, n)?),
    }
}

/// Fuses `r` into a feature map `z` of shape `[c, h, w]`, one value (two for
/// affine) per channel broadcast over the plane.
pub fn fuse_conv_var<'t, T: Scalar>(z: Var<'t, T>, r: Var<'t, T>, op: FusionOperator) -> Result<Var<'t, T>> {
    let shape = z.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape(format!("conv fusion expects [c, h, w], got {shape:?}")));
    }
    let c = shape[0];
    check_width(c, &r, op)?;
    match op {
        FusionOperator::Additive => z.channel_add(r),
        FusionOperator::Multiplicative => z.channel_mul(r),
        FusionOperator::Residual => z.add(z.channel_mul(r)?),
        FusionOperator::Affine => z.channel_mul(r.slice(0, c)?)?.channel_add(r.slice(c, c)?),
    }
}

pub fn fuse_var<'t, T: Scalar>(z: Var<'t, T>, r: Var<'t, T>, op: FusionOperator, site: Site) -> Result<Var<'t, T>> {
    match site {
        Site::LinearPreactivation => fuse_linear_var(z, r, op),
        Site::ConvChannelwise => fuse_conv_var(z, r, op),
    }
}

pub fn fuse_linear<T: Scalar>(z: &Tensor<T>, r: &Tensor<T>, op: FusionOperator) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(fuse_linear_var(tape.constant(z), tape.constant(r), op)?.value())
}

pub fn fuse_conv<T: Scalar>(z: &Tensor<T>, r: &Tensor<T>, op: FusionOperator) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(fuse_conv_var(tape.constant(z), tape.constant(r), op)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f32]) -> Tensor<f32> {
        Tensor::vector(values.to_vec()).unwrap()
    }

    #[test]
    fn linear_definitions() {
        let z = v(&[1.0, 2.0]);
        let r = v(&[0.5, -1.0]);
        assert_eq!(fuse_linear(&z, &r, FusionOperator::Additive).unwrap().values(), &[1.5, 1.0]);
        let z = v(&[2.0, 3.0]);
        assert_eq!(fuse_linear(&z, &r, FusionOperator::Residual).unwrap().values(), &[3.0, 0.0]);
        let ones = v(&[1.0, 1.0]);
        assert!(fuse_linear(&z, &ones, FusionOperator::Multiplicative).unwrap().bit_eq(&z));
    }

    #[test]
    fn affine_identity_matches_additive_zero() {
        let z = v(&[0.3, -1.7, 4.0]);
        let affine = fuse_linear(&z, &v(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]), FusionOperator::Affine).unwrap();
        let additive = fuse_linear(&z, &v(&[0.0; 3]), FusionOperator::Additive).unwrap();
        assert!(affine.bit_eq(&z));
        assert!(additive.bit_eq(&z));
    }

    #[test]
    fn conv_broadcast() {
        let z = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = fuse_conv(&z, &v(&[1.0, -1.0]), FusionOperator::Additive).unwrap();
        assert_eq!(out.values(), &[2.0, 3.0, 4.0, 5.0, 4.0, 5.0, 6.0, 7.0]);
        let out = fuse_conv(&z, &v(&[0.0, 1.0]), FusionOperator::Multiplicative).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0, 0.0, 0.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn width_errors_name_operator() {
        let z = v(&[1.0, 2.0]);
        let err = fuse_linear(&z, &z, FusionOperator::Affine).unwrap_err();
        assert_eq!(err.to_string(), "affine fusion expects r of width 4, got 2");
        let fm = Tensor::<f32>::zeros(&[3, 2, 2]).unwrap();
        assert!(fuse_conv(&fm, &v(&[0.0; 12]), FusionOperator::Additive).is_err());
    }

    #[test]
    fn required_dims() {
        let conv = AttachmentPoint {
            layer_id: "conv5".into(),
            site: Site::ConvChannelwise,
            width: 64,
        };
        assert_eq!(required_output_dim(&conv, FusionOperator::Additive), 64);
        let fc = AttachmentPoint {
            layer_id: "fc3".into(),
            site: Site::LinearPreactivation,
            width: 397,
        };
        assert_eq!(required_output_dim(&fc, FusionOperator::Affine), 794);
    }

    #[test]
    fn operator_names_roundtrip() {
        for op in FusionOperator::ALL {
            assert_eq!(op.name().parse::<FusionOperator>().unwrap(), op);
            let json = serde_json::to_string(&op).unwrap();
            assert_eq!(json, format!("\"{}\"", op.name()));
        }
        assert!("sum".parse::<FusionOperator>().is_err());
    }
}
