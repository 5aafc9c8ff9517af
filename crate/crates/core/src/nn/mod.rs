//! Minimal trainable CNN: stride-1 convolutions, ReLU, max-pool and dense
//! layers with a softmax cross-entropy loss and hand-written back-propagation.
//!
//! Gradients are always computed through the direct (spatial) convolution
//! path; the forward pass alone can be routed through any [`ConvEngine`].

pub mod arch;
pub mod data;
pub mod network;
pub mod optim;

pub use arch::{Architecture, LayerSpec};
pub use data::{BatchSchedule, Dataset, TrainBatch};
pub use network::{
    cross_entropy, default_bases, softmax, ConvEngine, DirectEngine, Network, ParamInfo, ParamRole, WinogradEngine,
};
pub use optim::{Optimizer, OptimizerKind};
