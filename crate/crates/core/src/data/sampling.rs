use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::depth::DepthMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplePattern {
    /// `n` distinct pixels, uniformly.
    Uniform { n: usize },
    /// `n` distinct pixels, denser near the centre: a bivariate bell of
    /// width `sigma` pixels, truncated to the image.
    Gaussian { n: usize, sigma: f64 },
    /// Pixels with `row % sy == 0` and `col % sx == 0`.
    Grid { sy: usize, sx: usize },
}

impl fmt::Display for SamplePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplePattern::Uniform { n } => write!(f, "uniform:{n}"),
            SamplePattern::Gaussian { n, sigma } => write!(f, "gaussian:{n}:{sigma}"),
            SamplePattern::Grid { sy, sx } => write!(f, "grid:{sy}:{sx}"),
        }
    }
}

impl FromStr for SamplePattern {
    type Err = Error;

    /// `uniform:N`, `gaussian:N:SIGMA` or `grid:SY:SX`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || {
            Error::Usage(format!(
                "invalid pattern {s:?}; expected uniform:N, gaussian:N:SIGMA or grid:SY:SX"
            ))
        };
        let int = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["uniform", n] => Ok(SamplePattern::Uniform { n: int(n)? }),
            ["gaussian", n, sigma] => Ok(SamplePattern::Gaussian {
                n: int(n)?,
                sigma: sigma.parse().map_err(|_| bad())?,
            }),
            ["grid", sy, sx] => Ok(SamplePattern::Grid {
                sy: int(sy)?,
                sx: int(sx)?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Keeps a subset of the valid pixels of `gt` chosen by `pattern`. The
/// selection depends only on the pattern, the map size and `seed`.
pub fn sample_sparse(gt: &DepthMap, pattern: SamplePattern, seed: u64) -> Result<DepthMap> {
    let keep = sample_mask(gt.dims(), pattern, seed)?;
    gt.restrict(&keep)
}

/// The boolean selection mask of [`sample_sparse`].
pub fn sample_mask((h, w): (usize, usize), pattern: SamplePattern, seed: u64) -> Result<Vec<bool>> {
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; hw];
    match pattern {
        SamplePattern::Uniform { n } => {
            check_count(n, hw)?;
            for i in rand::seq::index::sample(&mut rng, hw, n) {
                keep[i] = true;
            }
        }
        SamplePattern::Gaussian { n, sigma } => {
            check_count(n, hw)?;
            if sigma.is_nan() || sigma <= 0.0 {
                return Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")));
            }
            // Weighted sampling without replacement (Efraimidis-Spirakis):
            // the n smallest keys E_i / w_i, compared in log space.
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let inv = 1.0 / (2.0 * sigma * sigma);
            let mut keys: Vec<(f64, usize)> = (0..hw)
                .map(|i| {
                    let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                    let e: f64 = rng.sample(rand::distributions::Open01);
                    ((-e.ln()).ln() + (dy * dy + dx * dx) * inv, i)
                })
                .collect();
            if n > 0 {
                keys.select_nth_unstable_by(n - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            }
            for &(_, i) in &keys[..n] {
                keep[i] = true;
            }
        }
        SamplePattern::Grid { sy, sx } => {
            if sy == 0 || sx == 0 {
                return Err(Error::Config(format!("grid strides must be positive, got {sy}x{sx}")));
            }
            for y in (0..h).step_by(sy) {
                for x in (0..w).step_by(sx) {
                    keep[y * w + x] = true;
                }
            }
        }
    }
    Ok(keep)
}

fn check_count(n: usize, hw: usize) -> Result<()> {
    if n > hw {
        return Err(Error::Config(format!("cannot sample {n} pixels from {hw}")));
    }
    Ok(())
}

/// Per-tile valid fractions plus a histogram of them over `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityStats {
    pub tile: usize,
    /// Row-major over the tile grid.
    pub tile_density: Vec<f64>,
    /// `bins` equal-width buckets; a density of exactly 1 falls in the last.
    pub histogram: Vec<usize>,
}

impl DensityStats {
    pub fn mean_density(&self) -> f64 {
        self.tile_density.iter().sum::<f64>() / self.tile_density.len() as f64
    }
}

pub fn density_stats(d: &DepthMap, tile: usize, bins: usize) -> Result<DensityStats> {
    let (h, w) = d.dims();
    if tile == 0 || h % tile != 0 || w % tile != 0 {
        return Err(Error::Config(format!("tile {tile} does not divide the {h}x{w} map")));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let (ty, tx) = (h / tile, w / tile);
    let area = (tile * tile) as f64;
    let mut tile_density = Vec::with_capacity(ty * tx);
    let mut histogram = vec![0; bins];
    for by in 0..ty {
        for bx in 0..tx {
            let count = (0..tile)
                .flat_map(|y| (0..tile).map(move |x| (by * tile + y) * w + bx * tile + x))
                .filter(|&i| d.valid()[i])
                .count();
            let density = count as f64 / area;
            tile_density.push(density);
            histogram[((density * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }
    Ok(DensityStats {
        tile,
        tile_density,
        histogram,
    })
}
