//! Plugin networks, fusion operators and the joint model.

pub mod fusion;
pub mod joint;
pub mod network;

pub use fusion::{fuse_conv, fuse_linear, required_output_dim, FusionOperator};
pub use joint::JointModel;
pub use network::{PluginNetwork, PluginSpec};
