use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{loss_recons_var, MetricsReport};
use crate::error::{Error, Result};
use crate::hourglass::{ForwardOptions, Network};
use crate::tensor::{Adam, Graph, Mode, ParamStore, Session};

use super::config::ExperimentConfig;
use super::dataset::{Dataset, Split};
use super::eval::evaluate;

/// Everything a training run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Training-set loss with the initial parameters.
    pub initial_loss: f64,
    /// Training-set loss with the final parameters.
    pub final_loss: f64,
    /// Mean held-out metrics of the refined and coarse predictions.
    pub metrics: Option<MetricsReport>,
    pub coarse_metrics: Option<MetricsReport>,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// `initial_loss / final_loss`.
    pub fn loss_reduction(&self) -> f64 {
        self.initial_loss / self.final_loss
    }
}

pub struct TrainedModel {
    pub network: Network,
    pub store: ParamStore,
    pub record: RunRecord,
}

/// Reconstruction loss of the refined prediction over a whole dataset, with
/// batch statistics as in training. Batches are taken in order.
pub fn dataset_loss(net: &Network, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for idx in data.batches(batch_size) {
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::Train);
        let out = net.forward(&s, &data.input(net, &idx)?, ForwardOptions::default())?;
        let loss = loss_recons_var(out.refined, &data.targets(&idx))?.value().item()?;
        total += loss * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// One optimizer step on a batch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &Network,
    store: &mut ParamStore,
    adam: &mut Adam,
    data: &Dataset,
    idx: &[usize],
    lr: f64,
    bn_momentum: f64,
    step: usize,
) -> Result<f64> {
    let input = data.input(net, idx)?;
    let g = Graph::new();
    let s = Session::new(&g, store, Mode::Train);
    let out = net.forward(&s, &input, ForwardOptions::default())?;
    let loss = loss_recons_var(out.refined, &data.targets(idx))?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let grads = s.collect_grads(&g.backward(loss)?);
    adam.step(store, &grads, lr)?;
    store.update_running_stats(&s.take_bn_updates(), bn_momentum)?;
    Ok(value)
}

/// Trains from a fresh initialisation on the configured training scenes,
/// then evaluates on the held-out scenes.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let start = Instant::now();
    let net = Network::new(cfg.network.clone())?;
    let mut store = net.init_store(&mut cfg.stream("init"));
    let train_set = Dataset::generate(cfg, Split::Train)?;
    let o = &cfg.optimizer;

    let initial_loss = dataset_loss(&net, &store, &train_set, o.batch_size)?;
    let mut adam = Adam::new(o.adam);
    let mut shuffle = cfg.stream("train.shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let max_steps = o.max_steps.unwrap_or(usize::MAX);
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    'epochs: for epoch in 0..o.epochs {
        order.shuffle(&mut shuffle);
        let lr = o.learning_rate_at(epoch);
        let mut sum = 0.0;
        let mut count = 0;
        for idx in order.chunks(o.batch_size) {
            if step_losses.len() >= max_steps {
                if count > 0 {
                    epoch_losses.push(sum / count as f64);
                }
                break 'epochs;
            }
            let loss = train_step(&net, &mut store, &mut adam, &train_set, idx, lr, o.bn_momentum, step_losses.len())?;
            step_losses.push(loss);
            sum += loss;
            count += 1;
        }
        epoch_losses.push(sum / count as f64);
    }
    let final_loss = dataset_loss(&net, &store, &train_set, o.batch_size)?;

    let (metrics, coarse_metrics) = if cfg.data.eval_scenes > 0 {
        let report = evaluate(&net, &store, &Dataset::generate(cfg, Split::Eval)?, o.batch_size)?;
        (Some(report.mean_refined()?), Some(report.mean_coarse()?))
    } else {
        (None, None)
    };
    let record = RunRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        steps: step_losses.len(),
        step_losses,
        epoch_losses,
        initial_loss,
        final_loss,
        metrics,
        coarse_metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(TrainedModel {
        network: net,
        store,
        record,
    })
}
