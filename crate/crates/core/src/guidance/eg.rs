use rand::Rng;

use crate::error::{dim_err, Result};
use crate::nn::SepConv;
use crate::tensor::{ParamStore, Session, Shape, Var};

/// Parameters of one efficient-guidance unit at channel width `C`.
#[derive(Clone, Debug)]
pub struct EgParams {
    pub channels: usize,
    /// 3×3 separable conv over the image ‖ semantic ‖ depth stack, 3C → C.
    pub concat_conv: SepConv,
    /// 3×3 separable conv on the pooled C×1×1 filter, C → C·C.
    pub mixer_conv: SepConv,
}

impl EgParams {
    pub fn new(name: &str, channels: usize) -> Self {
        EgParams {
            channels,
            concat_conv: SepConv::new(format!("{name}.concat"), 3 * channels, channels, 3),
            mixer_conv: SepConv::new(format!("{name}.mixer"), channels, channels * channels, 3),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.concat_conv.init(store, rng);
        self.mixer_conv.init(store, rng);
    }
}

/// One efficient-guidance step.
///
/// The three inputs are concatenated and convolved, then pooled and squashed
/// by a sigmoid into a per-channel filter `g`. The channel-wise step scales `depth` by `g` at every
/// pixel; the cross-channel step multiplies the result by the `C×C` mixer
/// predicted from `g`. Kernel storage is `C·H·W + C²` per sample.
pub fn eg_unit<'g>(
    s: &Session<'g>,
    image: Var<'g>,
    semantic: Var<'g>,
    depth: Var<'g>,
    params: &EgParams,
) -> Result<Var<'g>> {
    let shape = depth.shape();
    if image.shape() != shape || semantic.shape() != shape {
        return Err(dim_err(
            "eg_unit",
            format!(
                "image {}, semantic {} and depth {} must share (batch, channels, height, width)",
                image.shape(),
                semantic.shape(),
                shape
            ),
        ));
    }
    if shape.c != params.channels {
        return Err(dim_err(
            "eg_unit",
            format!("features have {} channels, unit expects {}", shape.c, params.channels),
        ));
    }
    let stacked = Var::concat_channels(&[image, semantic, depth])?;
    let filter = params.concat_conv.forward(s, stacked)?.global_avg_pool().sigmoid();
    let scaled = depth.channel_scale(filter)?;
    let c = shape.c;
    let mixer = params
        .mixer_conv
        .forward(s, filter)?
        .reshape(Shape::new(shape.n, c, c, 1))?;
    scaled.channel_mix(mixer)
}
