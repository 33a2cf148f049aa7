use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spn::NeighborRule;

/// Encoder-decoder depth; spatial sizes halve four times.
pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HourglassConfig {
    pub levels: usize,
    /// Channels at level 1; doubled per level up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    /// Number of image-branch hourglass units.
    pub num_units: usize,
    /// Guidance repetitions `k` per depth-branch level.
    pub repetitions: usize,
    /// One-hot planes for region labels; larger labels are dropped.
    pub semantic_planes: usize,
    /// Depth inputs are divided by this and predictions multiplied by it.
    pub depth_scale: f64,
}

impl Default for HourglassConfig {
    fn default() -> Self {
        HourglassConfig {
            levels: LEVELS,
            base_channels: 8,
            max_channels: 32,
            num_units: 3,
            repetitions: 3,
            semantic_planes: 8,
            depth_scale: 10.0,
        }
    }
}

impl HourglassConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != LEVELS {
            return Err(Error::Config(format!("levels must be {LEVELS}, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config(format!(
                "channels need 0 < base ({}) <= max ({})",
                self.base_channels, self.max_channels
            )));
        }
        if self.num_units == 0 {
            return Err(Error::Config("at least one hourglass unit is required".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("guidance repetitions must be at least 1".into()));
        }
        if self.semantic_planes == 0 {
            return Err(Error::Config("semantic encoding needs at least one plane".into()));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(Error::Config(format!("depth_scale must be positive, got {}", self.depth_scale)));
        }
        Ok(())
    }

    /// Channel count at each level, level 1 first.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|j| (self.base_channels << j).min(self.max_channels))
            .collect()
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpnConfig {
    pub rule: NeighborRule,
    pub iterations: usize,
    /// Neighbor spacing for the region-aware rule.
    pub dilation: usize,
    /// Bound on the per-pixel sum of absolute affinities.
    pub gamma: f64,
}

impl Default for SpnConfig {
    fn default() -> Self {
        SpnConfig {
            rule: NeighborRule::Raspn,
            iterations: 4,
            dilation: 1,
            gamma: 1.0,
        }
    }
}

impl SpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::Config("spn dilation must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("spn gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Everything needed to build a [`super::Network`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hourglass: HourglassConfig,
    pub spn: SpnConfig,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.hourglass.validate()?;
        self.spn.validate()
    }
}
