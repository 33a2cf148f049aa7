use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Per-pixel integer region labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    h: usize,
    w: usize,
    labels: Vec<u32>,
}

impl RegionMask {
    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(dim_err(
                "RegionMask",
                format!("{} labels for a {h}x{w} mask", labels.len()),
            ));
        }
        Ok(RegionMask { h, w, labels })
    }

    pub fn uniform(h: usize, w: usize) -> Self {
        RegionMask {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> u32) -> Self {
        let labels = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        RegionMask { h, w, labels }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    L2R,
    R2L,
    T2B,
    B2T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborRule {
    SpnDirection(Direction),
    Cspn,
    Raspn,
}

/// A table of `K` candidate offsets plus a per-pixel flag saying which of
/// them are real neighbors. Affinity fields are `(B, K, H, W)` and line up
/// with the slots.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub rule: NeighborRule,
    h: usize,
    w: usize,
    offsets: Vec<(isize, isize)>,
    /// Slot-major: `valid[k * H * W + y * W + x]`.
    valid: Vec<bool>,
}

impl NeighborSet {
    fn clipped(rule: NeighborRule, h: usize, w: usize, offsets: Vec<(isize, isize)>) -> Self {
        let mut valid = Vec::with_capacity(offsets.len() * h * w);
        for &(dy, dx) in &offsets {
            for y in 0..h {
                for x in 0..w {
                    valid.push(inside(y, x, dy, dx, h, w).is_some());
                }
            }
        }
        NeighborSet {
            rule,
            h,
            w,
            offsets,
            valid,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn slots(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn is_valid(&self, k: usize, y: usize, x: usize) -> bool {
        self.valid[k * self.h * self.w + y * self.w + x]
    }

    pub(crate) fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Neighbor coordinates of pixel `(y, x)` in slot order.
    pub fn neighbors_of(&self, y: usize, x: usize) -> Vec<(usize, usize)> {
        (0..self.slots())
            .filter(|&k| self.is_valid(k, y, x))
            .map(|k| {
                let (dy, dx) = self.offsets[k];
                ((y as isize + dy) as usize, (x as isize + dx) as usize)
            })
            .collect()
    }

    pub fn count(&self, y: usize, x: usize) -> usize {
        (0..self.slots()).filter(|&k| self.is_valid(k, y, x)).count()
    }

    pub fn total_links(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Flat index of the neighbor in slot `k` of pixel `p`, if any.
    pub(crate) fn target(&self, k: usize, p: usize) -> Option<usize> {
        if !self.valid[k * self.h * self.w + p] {
            return None;
        }
        let (dy, dx) = self.offsets[k];
        let (y, x) = (p / self.w, p % self.w);
        Some((y as isize + dy) as usize * self.w + (x as isize + dx) as usize)
    }
}

fn inside(y: usize, x: usize, dy: isize, dx: isize, h: usize, w: usize) -> Option<(usize, usize)> {
    let (ny, nx) = (y as isize + dy, x as isize + dx);
    (ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize).then_some((ny as usize, nx as usize))
}

/// Three-way connection to the previous row or column of a directional scan.
pub fn neighbors_spn(direction: Direction, h: usize, w: usize) -> NeighborSet {
    let offsets = (-1..=1)
        .map(|u| match direction {
            Direction::L2R => (u, -1),
            Direction::R2L => (u, 1),
            Direction::T2B => (-1, u),
            Direction::B2T => (1, u),
        })
        .collect();
    NeighborSet::clipped(NeighborRule::SpnDirection(direction), h, w, offsets)
}

/// The 8-neighborhood, clipped at the borders.
pub fn neighbors_cspn(h: usize, w: usize) -> NeighborSet {
    let offsets = (-1..=1)
        .flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
        .filter(|&o| o != (0, 0))
        .collect();
    NeighborSet::clipped(NeighborRule::Cspn, h, w, offsets)
}

/// Keeps only the base neighbors that share the pixel's region label. Every
/// offset is first multiplied by `dilation` (1 keeps the base offsets).
pub fn neighbors_raspn(base: &NeighborSet, mask: &RegionMask, dilation: usize) -> Result<NeighborSet> {
    if base.dims() != mask.dims() {
        return Err(dim_err(
            "neighbors_raspn",
            format!("neighbor set is {:?} but mask is {:?} (height, width)", base.dims(), mask.dims()),
        ));
    }
    if dilation == 0 {
        return Err(Error::Config("offset dilation must be at least 1".into()));
    }
    let (h, w) = base.dims();
    let d = dilation as isize;
    let offsets: Vec<(isize, isize)> = base.offsets.iter().map(|&(dy, dx)| (dy * d, dx * d)).collect();
    let mut valid = Vec::with_capacity(base.valid.len());
    for (k, &(dy, dx)) in offsets.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let base_ok = dilation > 1 || base.is_valid(k, y, x);
                let keep = base_ok
                    && inside(y, x, dy, dx, h, w).is_some_and(|(ny, nx)| mask.label(ny, nx) == mask.label(y, x));
                valid.push(keep);
            }
        }
    }
    Ok(NeighborSet {
        rule: NeighborRule::Raspn,
        h,
        w,
        offsets,
        valid,
    })
}
