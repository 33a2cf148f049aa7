use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{ConvBlock, PreActConv, ResBlock, UpBlock};
use crate::tensor::{ConvGeometry, ParamStore, Session, Var};

/// One encoder step `f^c`: a strided conv block followed by either a
/// residual block (full) or a second conv block (light).
#[derive(Clone, Debug)]
pub enum EncoderLayer {
    Full { conv: ConvBlock, res: ResBlock },
    Light { first: ConvBlock, second: ConvBlock },
}

impl EncoderLayer {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, full: bool) -> Self {
        let geometry = ConvGeometry::new(stride, 1);
        let conv = ConvBlock::new(&format!("{name}.a"), cin, cout, geometry);
        if full {
            EncoderLayer::Full {
                conv,
                res: ResBlock::new(&format!("{name}.res"), cout),
            }
        } else {
            EncoderLayer::Light {
                first: conv,
                second: ConvBlock::new(&format!("{name}.b"), cout, cout, ConvGeometry::same(3)),
            }
        }
    }

    /// Number of 3×3 convolutions in the layer.
    pub fn conv_count(&self) -> usize {
        match self {
            EncoderLayer::Full { .. } => 3,
            EncoderLayer::Light { .. } => 2,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        match self {
            EncoderLayer::Full { conv, res } => {
                conv.init(store, rng);
                res.init(store, rng);
            }
            EncoderLayer::Light { first, second } => {
                first.init(store, rng);
                second.init(store, rng);
            }
        }
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        match self {
            EncoderLayer::Full { conv, res } => res.forward(s, conv.forward(s, x)?),
            EncoderLayer::Light { first, second } => second.forward(s, first.forward(s, x)?),
        }
    }
}

/// Encoder and decoder features of one hourglass, level 1 first.
#[derive(Clone, Debug)]
pub struct UnitFeatures<'g> {
    pub encoders: Vec<Var<'g>>,
    pub decoders: Vec<Var<'g>>,
}

/// `f^t(Σ_s D_sj)`: the summed decoder features of all earlier units at one
/// level, passed through BN → ReLU → conv.
pub fn dense_aggregate<'g>(s: &Session<'g>, transform: &PreActConv, priors: &[Var<'g>]) -> Result<Var<'g>> {
    if priors.is_empty() {
        return Err(Error::Usage(
            "dense aggregation needs the decoder features of at least one earlier unit".into(),
        ));
    }
    transform.forward(s, Var::add_n(priors)?)
}

/// One hourglass. Unit 1 reads the stem output; unit `i > 1` reads
/// `D_(i-1)1` and densely aggregates the decoders of units `1..i` at levels
/// 2 and deeper.
#[derive(Clone, Debug)]
pub struct HourglassUnit {
    /// 1-based unit index.
    pub index: usize,
    pub encoders: Vec<EncoderLayer>,
    /// `dense[j]` serves level `j + 1`; absent at level 1 and for unit 1.
    pub dense: Vec<Option<PreActConv>>,
    /// Produces the deepest decoder feature from the deepest encoder feature.
    pub bottleneck: EncoderLayer,
    /// `ups[j]` lifts level `j + 2` to level `j + 1`.
    pub ups: Vec<UpBlock>,
}

impl HourglassUnit {
    /// `full` selects residual encoder layers.
    pub fn new(name: &str, index: usize, channels: &[usize], full: bool) -> Self {
        let levels = channels.len();
        let encoders = (0..levels)
            .map(|j| {
                let cin = channels[j.saturating_sub(1)];
                let stride = if j == 0 { 1 } else { 2 };
                EncoderLayer::new(&format!("{name}.enc{}", j + 1), cin, channels[j], stride, full)
            })
            .collect();
        let dense = (0..levels)
            .map(|j| (index > 1 && j > 0).then(|| PreActConv::new(&format!("{name}.dense{}", j + 1), channels[j])))
            .collect();
        let deepest = channels[levels - 1];
        let bottleneck = EncoderLayer::new(&format!("{name}.mid"), deepest, deepest, 1, full);
        let ups = (0..levels - 1)
            .map(|j| UpBlock::new(&format!("{name}.up{}", j + 1), channels[j + 1], channels[j]))
            .collect();
        HourglassUnit {
            index,
            encoders,
            dense,
            bottleneck,
            ups,
        }
    }

    pub fn levels(&self) -> usize {
        self.encoders.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for e in &self.encoders {
            e.init(store, rng);
        }
        for d in self.dense.iter().flatten() {
            d.init(store, rng);
        }
        self.bottleneck.init(store, rng);
        for u in &self.ups {
            u.init(store, rng);
        }
    }

    /// Runs the unit on `input` given the features of every earlier unit.
    pub fn forward<'g>(&self, s: &Session<'g>, input: Var<'g>, priors: &[UnitFeatures<'g>]) -> Result<UnitFeatures<'g>> {
        let levels = self.levels();
        if priors.len() != self.index - 1 {
            return Err(Error::Usage(format!(
                "hourglass unit {} needs features of {} earlier units, got {}",
                self.index,
                self.index - 1,
                priors.len()
            )));
        }
        if let Some(p) = priors.iter().find(|p| p.decoders.len() != levels) {
            return Err(Error::Usage(format!(
                "earlier unit exposes {} decoder levels, expected {levels}",
                p.decoders.len()
            )));
        }
        let mut encoders: Vec<Var<'g>> = Vec::with_capacity(levels);
        for j in 0..levels {
            let from = if j == 0 { input } else { encoders[j - 1] };
            let mut e = self.encoders[j].forward(s, from)?;
            if let Some(t) = &self.dense[j] {
                let at_level: Vec<Var<'g>> = priors.iter().map(|p| p.decoders[j]).collect();
                e = e.add(dense_aggregate(s, t, &at_level)?)?;
            }
            encoders.push(e);
        }
        let decoders = decode(s, &self.bottleneck, &self.ups, &encoders)?;
        Ok(UnitFeatures { encoders, decoders })
    }
}

/// `D_5 = f^c(E_5)` and `D_j = up(D_(j+1)) + E_j`.
pub(crate) fn decode<'g>(
    s: &Session<'g>,
    bottleneck: &EncoderLayer,
    ups: &[UpBlock],
    encoders: &[Var<'g>],
) -> Result<Vec<Var<'g>>> {
    let levels = encoders.len();
    let mut decoders = vec![bottleneck.forward(s, encoders[levels - 1])?];
    for j in (0..levels - 1).rev() {
        let up = ups[j].forward(s, decoders[0])?;
        if up.shape() != encoders[j].shape() {
            return Err(dim_err(
                "hourglass decoder",
                format!("level {} upsampled to {} but the skip is {}", j + 1, up.shape(), encoders[j].shape()),
            ));
        }
        decoders.insert(0, up.add(encoders[j])?);
    }
    Ok(decoders)
}
