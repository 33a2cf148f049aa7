use std::fs;
use std::path::{Path, PathBuf};

use crate::data::io::write_metrics_csv;
use crate::error::Result;
use crate::hourglass::Network;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::ExperimentConfig;
use super::dataset::{Dataset, Split};
use super::eval::{evaluate, EvalReport};
use super::train::{train, RunRecord};

pub const CHECKPOINT_STEM: &str = "checkpoint";

/// Trains and writes `config.json`, `run_record.json` and the checkpoint to
/// the run directory, which is returned.
pub fn run_training(cfg: &ExperimentConfig) -> Result<(PathBuf, RunRecord)> {
    let trained = train(cfg)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    fs::write(dir.join("run_record.json"), serde_json::to_string_pretty(&trained.record)?)?;
    save_checkpoint(&dir, CHECKPOINT_STEM, &trained.store, &trained.record.config_hash)?;
    Ok((dir, trained.record))
}

/// Evaluates a checkpoint on the held-out scenes and writes `eval.csv` to
/// the run directory.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(PathBuf, EvalReport)> {
    cfg.validate()?;
    let net = Network::new(cfg.network.clone())?;
    let template = net.init_store(&mut cfg.stream("init"));
    let (store, _) = load_checkpoint(checkpoint, &template)?;
    let data = Dataset::generate(cfg, Split::Eval)?;
    let report = evaluate(&net, &store, &data, cfg.optimizer.batch_size)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let path = dir.join("eval.csv");
    write_metrics_csv(&path, &report.csv_rows()?)?;
    Ok((path, report))
}
