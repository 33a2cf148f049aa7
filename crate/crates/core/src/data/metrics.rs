use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Var;

use super::depth::DepthMap;

/// The seven evaluation metrics. Error metrics are in depth units (inverse
/// ones in reciprocal depth units); deltas are percentages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rel: f64,
    pub mae: f64,
    pub imae: f64,
    pub rmse: f64,
    pub irmse: f64,
    pub rmselog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl MetricsReport {
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.rel,
            self.mae,
            self.imae,
            self.rmse,
            self.irmse,
            self.rmselog,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        MetricsReport {
            rel: a[0],
            mae: a[1],
            imae: a[2],
            rmse: a[3],
            irmse: a[4],
            rmselog: a[5],
            delta1: a[6],
            delta2: a[7],
            delta3: a[8],
        }
    }

    /// Entry-wise mean.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Evaluation("mean of zero metric reports".into()));
        }
        let mut acc = [0.0; 9];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.to_array()) {
                *a += v;
            }
        }
        Ok(MetricsReport::from_array(acc.map(|a| a / reports.len() as f64)))
    }
}

fn check_dims(op: &'static str, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(dim_err(
            op,
            format!("prediction {:?} and ground truth {:?} differ (height, width)", pred.dims(), gt.dims()),
        ));
    }
    if gt.valid_count() == 0 {
        return Err(Error::Evaluation(format!("{op}: ground truth has no valid pixels")));
    }
    Ok(())
}

/// Mean squared error over the valid pixels of `gt`.
pub fn loss_recons(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    check_dims("loss_recons", pred, gt)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..gt.valid().len() {
        if gt.valid()[i] {
            let d = pred.values()[i] - gt.values()[i];
            sum += d * d;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Differentiable reconstruction loss of a `(B, 1, H, W)` prediction against
/// one ground truth per batch item.
pub fn loss_recons_var<'g>(pred: Var<'g>, gt: &[DepthMap]) -> Result<Var<'g>> {
    let s = pred.shape();
    if s.c != 1 || s.n != gt.len() || gt.iter().any(|g| g.dims() != (s.h, s.w)) {
        return Err(dim_err(
            "loss_recons",
            format!("prediction {s} does not match {} ground-truth maps", gt.len()),
        ));
    }
    let target: Vec<f64> = gt.iter().flat_map(|g| g.values().iter().copied()).collect();
    let valid: Vec<bool> = gt.iter().flat_map(|g| g.valid().iter().copied()).collect();
    pred.masked_mse(&crate::tensor::Tensor::new(s, target)?, &valid)
}

/// Metrics of `pred` over the valid pixels of `gt`. The prediction must be
/// valid (hence positive) wherever `gt` is.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricsReport> {
    check_dims("compute_metrics", pred, gt)?;
    let mut acc = [0.0; 9];
    let mut n = 0usize;
    for i in 0..gt.valid().len() {
        if !gt.valid()[i] {
            continue;
        }
        if !pred.valid()[i] {
            let w = gt.dims().1;
            return Err(Error::Evaluation(format!(
                "prediction is not positive at valid pixel ({}, {}); inverse and log metrics need positive depth",
                i / w,
                i % w
            )));
        }
        let (x, y) = (pred.values()[i], gt.values()[i]);
        let d = (y - x).abs();
        let di = (1.0 / y - 1.0 / x).abs();
        let dl = y.ln() - x.ln();
        let ratio = (y / x).max(x / y);
        acc[0] += d / y;
        acc[1] += d;
        acc[2] += di;
        acc[3] += d * d;
        acc[4] += di * di;
        acc[5] += dl * dl;
        for (k, slot) in acc[6..].iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *slot += 1.0;
            }
        }
        n += 1;
    }
    let m = n as f64;
    Ok(MetricsReport {
        rel: acc[0] / m,
        mae: acc[1] / m,
        imae: acc[2] / m,
        rmse: (acc[3] / m).sqrt(),
        irmse: (acc[4] / m).sqrt(),
        rmselog: (acc[5] / m).sqrt(),
        delta1: 100.0 * acc[6] / m,
        delta2: 100.0 * acc[7] / m,
        delta3: 100.0 * acc[8] / m,
    })
}
