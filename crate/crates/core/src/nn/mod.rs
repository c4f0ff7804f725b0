//! Layers, networks, forward/backward passes and the grouping view.

pub mod arch;
pub mod checkpoint;
pub mod grouping;
pub mod layer;
pub mod network;

pub use arch::{build_lenet, build_mlp, Arch};
pub use grouping::{DenseGrouping, GroupLayout, GroupNormVector, GroupingMode, ParamGroupView};
pub use layer::LayerSpec;
pub use network::{softmax, softmax_cross_entropy, ForwardCache, LayerParams, Network, Params};
