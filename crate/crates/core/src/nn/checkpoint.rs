//! Binary checkpoint format.
//!
//! ```text
//! "PLGN" | version: u32 LE | header_len: u32 LE | header: JSON | payload: f32 LE...
//! ```
//!
//! The header holds the input shape and layer list (and, for plugin files, a
//! `plugin` object). The payload lists every parameter tensor in layer order,
//! weight before bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::LayerSpec;
use crate::nn::network::BaseNetwork;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PLGN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin: Option<serde_json::Value>,
}

/// Serializes `header` and `params` into the checkpoint layout.
pub fn encode(header: &CheckpointHeader, params: &[&Tensor<f32>]) -> Result<Vec<u8>> {
    let text = serde_json::to_vec(header)?;
    let n: usize = params.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(12 + text.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let len = u32::try_from(text.len()).map_err(|_| Error::Header("header too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&text);
    for t in params {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a checkpoint into its header and raw payload values.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f32>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotCheckpoint);
    }
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Header("truncated preamble".into()))
    };
    let version = word(4)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = word(8)? as usize;
    let text = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Header("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(text).map_err(|e| Error::Header(e.to_string()))?;
    let payload = &bytes[12 + header_len..];
    if !payload.len().is_multiple_of(4) {
        return Err(Error::PayloadLength {
            expected: expected_len(&header) * 4,
            actual: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, values))
}

fn expected_len(header: &CheckpointHeader) -> usize {
    header
        .layers
        .iter()
        .flat_map(LayerSpec::param_shapes)
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Rebuilds a network from a header and payload. The result is frozen.
pub fn network_from(header: &CheckpointHeader, values: &[f32]) -> Result<BaseNetwork<f32>> {
    let expected = expected_len(header);
    if values.len() != expected {
        return Err(Error::PayloadLength {
            expected: expected * 4,
            actual: values.len() * 4,
        });
    }
    let mut tensors = Vec::new();
    let mut offset = 0;
    for layer in &header.layers {
        for p in layer.param_shapes() {
            let n: usize = p.shape.iter().product();
            tensors.push(Tensor::new(&p.shape, values[offset..offset + n].to_vec())?);
            offset += n;
        }
    }
    let mut net = BaseNetwork::from_parts(header.layers.clone(), &header.input_shape, tensors)?;
    net.freeze();
    Ok(net)
}

pub fn header_of(net: &BaseNetwork<f32>) -> CheckpointHeader {
    CheckpointHeader {
        input_shape: net.input_shape().to_vec(),
        layers: net.layers().to_vec(),
        plugin: None,
    }
}

pub fn to_bytes(net: &BaseNetwork<f32>) -> Result<Vec<u8>> {
    encode(&header_of(net), &net.params())
}

/// Parses a base checkpoint; the returned network is frozen.
pub fn from_bytes(bytes: &[u8]) -> Result<BaseNetwork<f32>> {
    let (header, values) = decode(bytes)?;
    network_from(&header, &values)
}

pub fn save_checkpoint(net: &BaseNetwork<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BaseNetwork<f32>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> BaseNetwork<f32> {
        BaseNetwork::build(
            vec![
                LayerSpec::conv2d("c1", 1, 2, [3, 3], 1, 1),
                LayerSpec::relu("r"),
                LayerSpec::flatten("f"),
                LayerSpec::dense("d", 2 * 4 * 4, 3),
            ],
            &[1, 4, 4],
            9,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact_and_frozen() {
        let a = net();
        let b = from_bytes(&to_bytes(&a).unwrap()).unwrap();
        assert!(b.is_frozen());
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.bit_eq(y));
        }
        assert_eq!(to_bytes(&a).unwrap(), to_bytes(&b).unwrap());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = to_bytes(&net()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(from_bytes(&bytes).unwrap_err().to_string(), "not a checkpoint");
    }

    #[test]
    fn future_version() {
        let mut bytes = to_bytes(&net()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .starts_with("unsupported version"));
    }

    #[test]
    fn truncated_payload() {
        let bytes = to_bytes(&net()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().starts_with("payload length mismatch"), "{err}");
        let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().starts_with("payload length mismatch"), "{err}");
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.plgn");
        let a = net();
        save_checkpoint(&a, &path).unwrap();
        let b = load_checkpoint(&path).unwrap();
        assert_eq!(a.layers(), b.layers());
    }
}
