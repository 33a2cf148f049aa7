//! Three-branch completion network: densely connected image hourglasses, a
//! semantic hourglass over one-hot region planes, and a depth hourglass that
//! fuses both through repetitive guidance before propagation refinement.

mod config;
mod layers;
mod network;

pub use config::{HourglassConfig, NetworkConfig, SpnConfig, LEVELS};
pub use layers::{dense_aggregate, EncoderLayer, HourglassUnit, UnitFeatures};
pub use network::{
    one_hot_regions, rignetpp_forward, BranchState, DepthBranch, ForwardOptions, ImageBranch, NetInput, NetOutput,
    Network, SemanticBranch, MIN_PREDICTED_DEPTH,
};
