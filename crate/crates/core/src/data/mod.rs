//! Synthetic scenes, sparse samplers, the reconstruction loss, evaluation
//! metrics and raster I/O.

mod depth;
pub mod io;
mod metrics;
mod sampling;
mod scene;

pub use depth::DepthMap;
pub use metrics::{compute_metrics, loss_recons, loss_recons_var, MetricsReport};
pub use sampling::{density_stats, sample_mask, sample_sparse, DensityStats, SamplePattern};
pub use scene::{synth_scene, Scene, BACKGROUND_DEPTH, MAX_OBJECTS, MIN_SEPARATION, NEAREST_DEPTH};
