//! Multi-branch density network: tensors, conv kernels, an eager autograd
//! tape, model assembly, and checkpointing.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};

pub use graph::{NodeId, Param, Tape};
pub use model::{
    backbone_spec, tap_channels, Backbone, FeatureGrid, FusionState, LayerKind, LayerSpec,
    Network, NetworkConfig, ScfbTrace, SideOutput, Topology, TracedForward,
};
pub use tensor::Tensor;
