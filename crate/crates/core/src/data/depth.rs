use crate::error::{dim_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// A depth raster with a validity mask. Valid pixels hold strictly positive,
/// finite depth; invalid pixels store 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != h * w || valid.len() != h * w {
            return Err(dim_err(
                "DepthMap",
                format!("{} values and {} flags for a {h}x{w} map", values.len(), valid.len()),
            ));
        }
        if let Some(i) = (0..h * w).find(|&i| valid[i] && !(values[i].is_finite() && values[i] > 0.0)) {
            return Err(Error::Evaluation(format!(
                "valid pixel ({}, {}) has non-positive or non-finite depth {}",
                i / w,
                i % w,
                values[i]
            )));
        }
        let values = values.iter().zip(&valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
        Ok(DepthMap { h, w, values, valid })
    }

    /// Every pixel valid.
    pub fn dense(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        DepthMap::new(h, w, values, vec![true; h * w])
    }

    /// Pixels with value > 0 are valid.
    pub fn from_positive(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|&v| v > 0.0 && v.is_finite()).collect();
        DepthMap::new(h, w, values, valid)
    }

    pub fn empty(h: usize, w: usize) -> Self {
        DepthMap {
            h,
            w,
            values: vec![0.0; h * w],
            valid: vec![false; h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, y: usize, x: usize) -> Option<f64> {
        let i = y * self.w + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Keeps only the pixels where `keep` is true (and already valid).
    pub fn restrict(&self, keep: &[bool]) -> Result<DepthMap> {
        if keep.len() != self.valid.len() {
            return Err(dim_err("DepthMap::restrict", "mask length differs from the map"));
        }
        let valid: Vec<bool> = self.valid.iter().zip(keep).map(|(&a, &b)| a && b).collect();
        DepthMap::new(self.h, self.w, self.values.clone(), valid)
    }

    /// `(1, 1, H, W)` depth with zeros at invalid pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(Shape::new(1, 1, self.h, self.w), self.values.clone()).expect("matching size")
    }

    /// `(1, 1, H, W)` validity indicator.
    pub fn validity_tensor(&self) -> Tensor {
        let v = self.valid.iter().map(|&b| f64::from(u8::from(b))).collect();
        Tensor::new(Shape::new(1, 1, self.h, self.w), v).expect("matching size")
    }

    /// Reads batch item `n` of a `(B, 1, H, W)` prediction, raising every
    /// value to at least `floor` (> 0) so the inverse and log metrics are
    /// defined. Non-finite values become `floor`.
    pub fn from_prediction(t: &Tensor, n: usize, floor: f64) -> Result<DepthMap> {
        let s = t.shape();
        if s.c != 1 || n >= s.n {
            return Err(dim_err("DepthMap::from_prediction", format!("need a 1-channel item {n} of {s}")));
        }
        if floor.is_nan() || floor <= 0.0 {
            return Err(Error::Config(format!("prediction floor must be positive, got {floor}")));
        }
        let values = t
            .batch_item(n)
            .data()
            .iter()
            .map(|&v| if v.is_finite() { v.max(floor) } else { floor })
            .collect();
        Ok(DepthMap {
            h: s.h,
            w: s.w,
            values,
            valid: vec![true; s.h * s.w],
        })
    }
}
