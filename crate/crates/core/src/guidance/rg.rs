use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::SepConv;
use crate::tensor::{ParamStore, Session, Var};

use super::eg::{eg_unit, EgParams};

/// Adaptive fusion of `k` step outputs.
#[derive(Clone, Debug)]
pub struct AfParams {
    pub steps: usize,
    /// 3×3 separable conv, k·C → C.
    pub fuse_conv: SepConv,
    /// 3×3 separable conv on the pooled vector, C → k logits.
    pub weight_conv: SepConv,
}

impl AfParams {
    pub fn new(name: &str, channels: usize, steps: usize) -> Self {
        AfParams {
            steps,
            fuse_conv: SepConv::new(format!("{name}.fuse"), steps * channels, channels, 3),
            weight_conv: SepConv::new(format!("{name}.weight"), channels, steps, 3),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fuse_conv.init(store, rng);
        self.weight_conv.init(store, rng);
    }
}

/// Per-step parameters. Steps after the first re-encode the image and
/// semantic features with their own convolutions.
#[derive(Clone, Debug)]
pub struct RgStep {
    pub eg: EgParams,
    pub image_conv: Option<SepConv>,
    pub semantic_conv: Option<SepConv>,
}

#[derive(Clone, Debug)]
pub struct RgParams {
    pub channels: usize,
    pub steps: Vec<RgStep>,
    pub af: AfParams,
}

impl RgParams {
    pub fn new(name: &str, channels: usize, repetitions: usize) -> Result<Self> {
        if repetitions < 1 {
            return Err(Error::Config(format!(
                "repetitive guidance needs at least one step, got {repetitions}"
            )));
        }
        let steps = (0..repetitions)
            .map(|k| RgStep {
                eg: EgParams::new(&format!("{name}.step{k}.eg"), channels),
                image_conv: (k > 0).then(|| SepConv::new(format!("{name}.step{k}.img"), channels, channels, 3)),
                semantic_conv: (k > 0)
                    .then(|| SepConv::new(format!("{name}.step{k}.sem"), channels, channels, 3)),
            })
            .collect();
        Ok(RgParams {
            channels,
            steps,
            af: AfParams::new(&format!("{name}.af"), channels, repetitions),
        })
    }

    pub fn repetitions(&self) -> usize {
        self.steps.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for step in &self.steps {
            step.eg.init(store, rng);
            if let Some(c) = &step.image_conv {
                c.init(store, rng);
            }
            if let Some(c) = &step.semantic_conv {
                c.init(store, rng);
            }
        }
        self.af.init(store, rng);
    }
}

/// Repetitive guidance: `d_1 = EG(image, semantic, depth)` and
/// `d_k = EG(conv_k(image), conv_k(semantic), d_{k-1})`, fused adaptively.
/// Returns the fused feature and every step output.
pub fn rg_module<'g>(
    s: &Session<'g>,
    image: Var<'g>,
    semantic: Var<'g>,
    depth: Var<'g>,
    params: &RgParams,
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let mut outputs = Vec::with_capacity(params.repetitions());
    let mut prev = depth;
    for step in &params.steps {
        let img = match &step.image_conv {
            Some(c) => c.forward(s, image)?,
            None => image,
        };
        let sem = match &step.semantic_conv {
            Some(c) => c.forward(s, semantic)?,
            None => semantic,
        };
        prev = eg_unit(s, img, sem, prev, &step.eg)?;
        outputs.push(prev);
    }
    let (fused, _) = af_fuse(s, &outputs, &params.af)?;
    Ok((fused, outputs))
}

/// Softmax-weighted combination of the step outputs. Returns the fused
/// feature and the `(B, k, 1, 1)` weights.
pub fn af_fuse<'g>(s: &Session<'g>, steps: &[Var<'g>], params: &AfParams) -> Result<(Var<'g>, Var<'g>)> {
    if steps.is_empty() {
        return Err(Error::Usage("adaptive fusion of an empty list".into()));
    }
    if steps.len() != params.steps {
        return Err(dim_err(
            "af_fuse",
            format!("{} inputs for a fusion configured with k = {}", steps.len(), params.steps),
        ));
    }
    let stacked = Var::concat_channels(steps)?;
    let pooled = params.fuse_conv.forward(s, stacked)?.global_avg_pool();
    let alpha = params.weight_conv.forward(s, pooled)?.channel_softmax();
    Ok((Var::weighted_sum(steps, alpha)?, alpha))
}
