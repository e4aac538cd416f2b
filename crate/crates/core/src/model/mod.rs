//! Network assembly, target/input scaling and the training losses.

mod clamp;
mod loss;
mod network;
mod scaler;

pub use clamp::{VarianceClamp, ACTIVE_SLOPE};
pub use loss::{
    mse_loss, physics_loss, physics_loss_values, regression_loss, total_loss, total_loss_graph,
    LossWeights, PHYS_EPS,
};
pub use network::{
    Block, DnnBaseline, EluqNetwork, ForwardMode, Head, Layer, NetOutput, Network, Topology,
};
pub use scaler::{FeatureScaler, TargetScaler, TargetTransform, INPUT_CLIP};
