//! Plugin networks: small MLPs that feed partially known labels into a
//! frozen base network by modulating its pre-activations.
//!
//! The crate is self-contained. [`tensor`] provides tensors and a
//! reverse-mode tape, [`nn`] the base networks, and [`plugin`] the plugins,
//! fusion operators and [`plugin::JointModel`]. [`train`] holds the
//! optimizer, training loops and metrics. [`synth`] generates the synthetic
//! tasks. [`fbprop`] is the feedback-prop inference baseline, and
//! [`experiment`] wires all of it into reproducible pipelines.
//!
//! ```
//! use plugnet::nn::{arch, BaseNetwork};
//! use plugnet::plugin::{FusionOperator, JointModel, PluginNetwork};
//! use plugnet::tensor::Tensor;
//!
//! let mut base: BaseNetwork = BaseNetwork::build(arch::toy_cls(&[1, 8, 8], 6)?, &[1, 8, 8], 0)?;
//! base.freeze();
//! let point = base.attachment_point("fc3")?;
//! let plugin = PluginNetwork::new(4, &[32], point, FusionOperator::Additive, 1)?;
//! let joint = JointModel::new(base, vec![plugin])?;
//! let y = joint.forward(&Tensor::zeros(&[1, 8, 8])?, &Tensor::new(&[4], vec![1.0, 0.0, 0.0, 1.0])?)?;
//! assert_eq!(y.shape(), &[6]);
//! # Ok::<(), plugnet::Error>(())
//! ```

pub mod bench;
pub mod error;
pub mod experiment;
pub mod fbprop;
pub mod gradcheck;
pub mod nn;
pub mod plugin;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Book chapters, compiled so their snippets run as doc tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/plugins.md")]
    mod plugins {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/feedback-prop.md")]
    mod feedback_prop {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
