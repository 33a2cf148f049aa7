use crate::data::{compute_metrics, DepthMap, MetricsReport};
use crate::error::{Error, Result};
use crate::hourglass::{Network, MIN_PREDICTED_DEPTH};
use crate::tensor::ParamStore;

use super::dataset::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    pub name: String,
    pub refined: MetricsReport,
    pub coarse: MetricsReport,
    /// Nearest-sample fill of the sparse input.
    pub baseline: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
}

impl EvalReport {
    pub fn mean_refined(&self) -> Result<MetricsReport> {
        MetricsReport::mean(&self.scenes.iter().map(|s| s.refined).collect::<Vec<_>>())
    }

    pub fn mean_coarse(&self) -> Result<MetricsReport> {
        MetricsReport::mean(&self.scenes.iter().map(|s| s.coarse).collect::<Vec<_>>())
    }

    pub fn mean_baseline(&self) -> Result<MetricsReport> {
        MetricsReport::mean(&self.scenes.iter().map(|s| s.baseline).collect::<Vec<_>>())
    }

    /// Per-scene refined rows followed by a `mean` row.
    pub fn csv_rows(&self) -> Result<Vec<(String, MetricsReport)>> {
        let mut rows: Vec<_> = self.scenes.iter().map(|s| (s.name.clone(), s.refined)).collect();
        rows.push(("mean".to_string(), self.mean_refined()?));
        Ok(rows)
    }
}

/// Fills every pixel with the depth of the nearest valid sample (ties go to
/// the first sample in row-major order).
pub fn nearest_fill(sparse: &DepthMap) -> Result<DepthMap> {
    let (h, w) = sparse.dims();
    let samples: Vec<(usize, usize, f64)> = (0..h * w)
        .filter(|&i| sparse.valid()[i])
        .map(|i| (i / w, i % w, sparse.values()[i]))
        .collect();
    if samples.is_empty() {
        return Err(Error::Evaluation("nearest fill of a map with no valid samples".into()));
    }
    let values = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            samples
                .iter()
                .min_by_key(|(sy, sx, _)| {
                    let (dy, dx) = (*sy as isize - y, *sx as isize - x);
                    dy * dy + dx * dx
                })
                .expect("non-empty")
                .2
        })
        .collect();
    DepthMap::dense(h, w, values)
}

/// Held-out metrics of the refined and coarse predictions for every scene.
pub fn evaluate(net: &Network, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let mut scenes = Vec::with_capacity(data.len());
    for idx in data.batches(batch_size.max(1)) {
        let (coarse, refined) = net.predict(store, &data.input(net, &idx)?)?;
        for (k, &i) in idx.iter().enumerate() {
            let gt = &data.scenes[i].depth;
            scenes.push(SceneEval {
                name: format!("scene{i:03}"),
                refined: compute_metrics(&DepthMap::from_prediction(&refined, k, MIN_PREDICTED_DEPTH)?, gt)?,
                coarse: compute_metrics(&DepthMap::from_prediction(&coarse, k, MIN_PREDICTED_DEPTH)?, gt)?,
                baseline: compute_metrics(&nearest_fill(&data.sparse[i])?, gt)?,
            });
        }
    }
    Ok(EvalReport { scenes })
}
