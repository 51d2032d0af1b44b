//! Layers, base networks and checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod layer;
pub mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layer::{LayerKind, LayerSpec};
pub use network::{AttachmentPoint, BaseNetwork, BoundNetwork, Site};
