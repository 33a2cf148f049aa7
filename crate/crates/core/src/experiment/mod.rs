//! Experiment plumbing: configuration, seeded data streams, training,
//! evaluation, checkpoints and gradient-check suites.

mod checkpoint;
mod config;
mod dataset;
mod eval;
pub mod gradcheck;
mod run;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Manifest, ManifestEntry, TensorKind,
    CHECKPOINT_FORMAT,
};
pub use config::{named_stream, DataConfig, ExperimentConfig, OptimizerConfig, OutputConfig};
pub use dataset::{Dataset, Split};
pub use eval::{evaluate, nearest_fill, EvalReport, SceneEval};
pub use run::{run_eval, run_training, CHECKPOINT_STEM};
pub use train::{dataset_loss, train, train_step, RunRecord, TrainedModel};
