use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, CheckpointHeader};
use crate::nn::{AttachmentPoint, BaseNetwork, BoundNetwork, LayerSpec};
use crate::plugin::fusion::{required_output_dim, FusionOperator};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Everything needed to rebuild a plugin's architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginSpec {
    pub attachment: AttachmentPoint,
    pub op: FusionOperator,
    pub pe_dim: usize,
    pub hidden: Vec<usize>,
}

impl PluginSpec {
    pub fn output_dim(&self) -> usize {
        required_output_dim(&self.attachment, self.op)
    }

    /// Dense layers `pe_dim -> hidden... -> output_dim`, ReLU after every
    /// layer but the last.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.pe_dim == 0 {
            return Err(Error::InvalidArgument("plugin input dimension must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("plugin hidden sizes must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut width = self.pe_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            layers.push(LayerSpec::dense(format!("fc{}", i + 1), width, h));
            layers.push(LayerSpec::relu(format!("relu{}", i + 1)));
            width = h;
        }
        layers.push(LayerSpec::dense("out", width, self.output_dim()));
        Ok(layers)
    }
}

/// A small fully connected network mapping partial evidence to a
/// modulation vector for one attachment point.
#[derive(Clone, Debug)]
pub struct PluginNetwork<T: Scalar = f32> {
    spec: PluginSpec,
    mlp: BaseNetwork<T>,
}

impl<T: Scalar> PluginNetwork<T> {
    pub fn new(
        pe_dim: usize,
        hidden: &[usize],
        attachment: AttachmentPoint,
        op: FusionOperator,
        seed: u64,
    ) -> Result<Self> {
        if attachment.width == 0 {
            return Err(Error::InvalidAttachment {
                layer: attachment.layer_id,
                reason: "zero width".into(),
            });
        }
        let spec = PluginSpec {
            attachment,
            op,
            pe_dim,
            hidden: hidden.to_vec(),
        };
        let mlp = BaseNetwork::build(spec.layers()?, &[pe_dim], seed)?;
        Ok(Self { spec, mlp })
    }

    pub fn from_parts(spec: PluginSpec, mlp: BaseNetwork<T>) -> Result<Self> {
        if mlp.layers() != spec.layers()?.as_slice() {
            return Err(Error::InvalidArgument("plugin layers do not match the plugin header".into()));
        }
        Ok(Self { spec, mlp })
    }

    pub fn spec(&self) -> &PluginSpec {
        &self.spec
    }

    pub fn attachment(&self) -> &AttachmentPoint {
        &self.spec.attachment
    }

    pub fn op(&self) -> FusionOperator {
        self.spec.op
    }

    pub fn input_dim(&self) -> usize {
        self.spec.pe_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn network(&self) -> &BaseNetwork<T> {
        &self.mlp
    }

    pub fn network_mut(&mut self) -> &mut BaseNetwork<T> {
        &mut self.mlp
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    /// `r` for partial evidence `pe`.
    pub fn forward(&self, pe: &Tensor<T>) -> Result<Tensor<T>> {
        self.mlp.forward(pe)
    }

    pub fn record<'t>(&self, tape: &'t Tape<T>, pe: Var<'t, T>) -> Result<(Var<'t, T>, BoundNetwork<'t, T>)> {
        self.mlp.record(tape, pe)
    }

    /// Zeroes the output weights and sets the output bias to the operator's
    /// identity element, so `r` is the identity for every input.
    pub fn make_identity(&mut self) -> Result<()> {
        let identity = self.spec.op.identity::<T>(self.spec.attachment.width)?;
        let mut params = self.mlp.params_mut()?;
        let n = params.len();
        params[n - 2].values_mut().fill(T::zero());
        params[n - 1].values_mut().copy_from_slice(identity.values());
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> PluginNetwork<U> {
        PluginNetwork {
            spec: self.spec.clone(),
            mlp: self.mlp.cast(),
        }
    }
}

impl PluginNetwork<f32> {
    /// Checkpoint bytes: the network format with a `plugin` header entry.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            plugin: Some(serde_json::to_value(&self.spec)?),
            ..checkpoint::header_of(&self.mlp)
        };
        checkpoint::encode(&header, &self.mlp.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, values) = checkpoint::decode(bytes)?;
        let spec: PluginSpec = match &header.plugin {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Header(e.to_string()))?,
            None => return Err(Error::Header("checkpoint has no plugin entry".into())),
        };
        let mut mlp = checkpoint::network_from(&header, &values)?;
        mlp.unfreeze();
        Self::from_parts(spec, mlp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
