use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{BaseNetwork, Site};
use crate::plugin::fusion::fuse_var;
use crate::plugin::network::PluginNetwork;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A frozen base network with plugins fused in at distinct layers.
///
/// The base is evaluated once per call. Each plugin's output replaces the
/// pre-activation of its layer before any later layer sees it.
#[derive(Clone, Debug)]
pub struct JointModel<T: Scalar = f32> {
    base: BaseNetwork<T>,
    plugins: Vec<PluginNetwork<T>>,
    /// Layer index of each plugin's attachment.
    sites: Vec<usize>,
}

impl<T: Scalar> JointModel<T> {
    pub fn new(base: BaseNetwork<T>, plugins: Vec<PluginNetwork<T>>) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::NotFrozen);
        }
        let mut sites = Vec::with_capacity(plugins.len());
        for p in &plugins {
            let index = base.validate_point(p.attachment())?;
            if sites.contains(&index) {
                return Err(Error::InvalidAttachment {
                    layer: p.attachment().layer_id.clone(),
                    reason: "more than one plugin at this layer".into(),
                });
            }
            sites.push(index);
        }
        Ok(Self { base, plugins, sites })
    }

    pub fn base(&self) -> &BaseNetwork<T> {
        &self.base
    }

    pub fn plugins(&self) -> &[PluginNetwork<T>] {
        &self.plugins
    }

    pub fn plugins_mut(&mut self) -> &mut [PluginNetwork<T>] {
        &mut self.plugins
    }

    pub fn into_parts(self) -> (BaseNetwork<T>, Vec<PluginNetwork<T>>) {
        (self.base, self.plugins)
    }

    pub fn plugin_param_count(&self) -> usize {
        self.plugins.iter().map(PluginNetwork::param_count).sum()
    }

    /// Records the joint forward pass. Returns the output and the plugin
    /// parameter vars, plugin by plugin in storage order. Base parameters are
    /// recorded untracked.
    pub fn record<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        pe: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let mut fusions: BTreeMap<usize, (Var<'t, T>, &PluginNetwork<T>)> = BTreeMap::new();
        let mut params = Vec::new();
        for (p, &index) in self.plugins.iter().zip(&self.sites) {
            if pe.shape() != [p.input_dim()] {
                return Err(Error::ShapeMismatch {
                    op: "partial evidence",
                    left: vec![p.input_dim()],
                    right: pe.shape(),
                });
            }
            let (r, bound) = p.record(tape, pe)?;
            params.extend(bound.vars());
            fusions.insert(index, (r, p));
        }
        let bound = self.base.bind(tape);
        let out = self
            .base
            .run_layers(&bound, 0..self.base.layers().len(), x, &mut |i, z| match fusions.get(&i) {
                Some((r, p)) => fuse_var(z, *r, p.op(), p.attachment().site),
                None => Ok(z),
            })?;
        Ok((out, params))
    }

    pub fn forward(&self, x: &Tensor<T>, pe: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let (out, _) = self.record(&tape, tape.constant(x), tape.constant(pe))?;
        Ok(out.value())
    }

    /// Attachment sites in plugin order.
    pub fn sites(&self) -> impl Iterator<Item = (usize, Site)> + '_ {
        self.sites
            .iter()
            .zip(&self.plugins)
            .map(|(i, p)| (*i, p.attachment().site))
    }

    pub fn cast<U: Scalar>(&self) -> JointModel<U> {
        JointModel {
            base: self.base.cast(),
            plugins: self.plugins.iter().map(PluginNetwork::cast).collect(),
            sites: self.sites.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch;
    use crate::plugin::FusionOperator;

    fn base() -> BaseNetwork<f32> {
        let mut b = BaseNetwork::build(arch::toy_cls(&[1, 6, 6], 5).unwrap(), &[1, 6, 6], 0).unwrap();
        b.freeze();
        b
    }

    fn input() -> Tensor<f32> {
        Tensor::new(&[1, 6, 6], (0..36).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect()).unwrap()
    }

    #[test]
    fn unfrozen_base_rejected() {
        let mut b = base();
        b.unfreeze();
        assert_eq!(JointModel::new(b, vec![]).unwrap_err().to_string(), "base must be frozen");
    }

    #[test]
    fn no_plugins_equals_base() {
        let b = base();
        let x = input();
        let expected = b.forward(&x).unwrap();
        let j = JointModel::new(b, vec![]).unwrap();
        assert!(j.forward(&x, &Tensor::zeros(&[3]).unwrap()).unwrap().bit_eq(&expected));
    }

    #[test]
    fn duplicate_attachment_rejected() {
        let b = base();
        let point = b.attachment_point("fc2").unwrap();
        let p1 = PluginNetwork::new(3, &[4], point.clone(), FusionOperator::Additive, 1).unwrap();
        let p2 = PluginNetwork::new(3, &[4], point, FusionOperator::Residual, 2).unwrap();
        assert!(JointModel::new(b, vec![p1, p2]).is_err());
    }

    #[test]
    fn single_pass_over_base() {
        let b = base();
        let plugins = ["conv1", "conv2", "fc1", "fc3"]
            .iter()
            .enumerate()
            .map(|(k, id)| {
                PluginNetwork::new(3, &[4], b.attachment_point(id).unwrap(), FusionOperator::Affine, k as u64)
                    .unwrap()
            })
            .collect();
        let j = JointModel::new(b, plugins).unwrap();
        j.base().reset_layer_calls();
        j.forward(&input(), &Tensor::vector(vec![1.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(j.base().layer_calls(), j.base().layers().len());
    }

    #[test]
    fn base_params_untracked() {
        let b = base();
        let p = PluginNetwork::new(3, &[4], b.attachment_point("fc1").unwrap(), FusionOperator::Additive, 1).unwrap();
        let j = JointModel::new(b, vec![p]).unwrap();
        let tape = Tape::new();
        let (out, params) = j
            .record(&tape, tape.constant(&input()), tape.constant(&Tensor::vector(vec![1.0, 0.0, 0.0]).unwrap()))
            .unwrap();
        assert_eq!(params.len(), 4);
        assert!(params.iter().all(Var::is_tracked));
        let grads = tape.backward(out.sum()).unwrap();
        let bound = j.base().bind(&tape);
        assert!(bound.vars().iter().all(|v| grads.get(*v).is_none()));
        assert!(params.iter().all(|v| grads.get(*v).is_some()));
    }
}
