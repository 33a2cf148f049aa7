use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spn::RegionMask;
use crate::tensor::{Shape, Tensor};

use super::depth::DepthMap;

/// Depth of the frontal background plane.
pub const BACKGROUND_DEPTH: f64 = 10.0;
/// Nearest object depth.
pub const NEAREST_DEPTH: f64 = 2.0;
/// Minimum depth gap between any two surfaces, background included.
pub const MIN_SEPARATION: f64 = 0.4;
/// Objects get distinct depth levels `NEAREST_DEPTH + j · MIN_SEPARATION`.
pub const MAX_OBJECTS: usize = 16;

const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub rgb: Tensor,
    pub depth: DepthMap,
    /// 0 is the background, `1..=objects` the objects.
    pub mask: RegionMask,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Object {
    kind: Kind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    depth: f64,
    color: [f64; 3],
}

impl Object {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            Kind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Kind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

fn shade(color: [f64; 3], depth: f64, y: usize, x: usize, h: usize, w: usize) -> [f64; 3] {
    let light = 1.15 - 0.6 * depth / BACKGROUND_DEPTH;
    let ramp = 0.9 + 0.1 * (y as f64 / h as f64 + x as f64 / w as f64) / 2.0;
    color.map(|c| (c * light * ramp).clamp(0.0, 1.0))
}

/// Renders a background plane plus `objects` rectangles and ellipses, each
/// at its own depth level, drawn far to near. Every object stays visible.
pub fn synth_scene(seed: u64, h: usize, w: usize, objects: usize) -> Result<Scene> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::Config(format!("scene size {h}x{w} must be a positive multiple of 16")));
    }
    if objects > MAX_OBJECTS {
        return Err(Error::Config(format!("at most {MAX_OBJECTS} objects, got {objects}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = rand::seq::index::sample(&mut rng, MAX_OBJECTS, objects).into_vec();
    let mut placed: Vec<Object> = levels
        .iter()
        .map(|&j| random_object(&mut rng, h, w, NEAREST_DEPTH + j as f64 * MIN_SEPARATION))
        .collect();
    placed.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut labels = vec![0u32; h * w];
    for attempt in 0.. {
        labels.fill(0);
        for (k, obj) in placed.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if obj.covers(y, x) {
                        labels[y * w + x] = k as u32 + 1;
                    }
                }
            }
        }
        let hidden: Vec<usize> = (0..placed.len())
            .filter(|&k| !labels.contains(&(k as u32 + 1)))
            .collect();
        if hidden.is_empty() {
            break;
        }
        if attempt == PLACEMENT_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not place {objects} visible objects on a {h}x{w} scene"
            )));
        }
        for k in hidden {
            placed[k] = random_object(&mut rng, h, w, placed[k].depth);
        }
    }

    let background = [0.55, 0.6, 0.7];
    let mut depth = vec![BACKGROUND_DEPTH; h * w];
    let mut rgb = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (d, color) = match labels[i] {
                0 => (BACKGROUND_DEPTH, background),
                l => {
                    let o = &placed[l as usize - 1];
                    (o.depth, o.color)
                }
            };
            depth[i] = d;
            for (c, v) in shade(color, d, y, x, h, w).into_iter().enumerate() {
                rgb[c * h * w + i] = v;
            }
        }
    }
    Ok(Scene {
        rgb: Tensor::new(Shape::new(1, 3, h, w), rgb)?,
        depth: DepthMap::dense(h, w, depth)?,
        mask: RegionMask::new(h, w, labels)?,
    })
}

fn random_object(rng: &mut ChaCha8Rng, h: usize, w: usize, depth: f64) -> Object {
    let (hf, wf) = (h as f64, w as f64);
    let ry = rng.gen_range(0.1..0.3) * hf;
    let rx = rng.gen_range(0.1..0.3) * wf;
    Object {
        kind: if rng.gen_bool(0.5) { Kind::Rect } else { Kind::Ellipse },
        cy: rng.gen_range(0.0..hf),
        cx: rng.gen_range(0.0..wf),
        ry,
        rx,
        depth,
        color: [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
    }
}
