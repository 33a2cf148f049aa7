use rand::Rng;

use crate::data::DepthMap;
use crate::error::{dim_err, Error, Result};
use crate::guidance::{rg_module, RgParams};
use crate::nn::{Conv, UpBlock};
use crate::spn::{
    neighbors_cspn, neighbors_raspn, neighbors_spn, normalize_affinity_batch, propagate_batch, NeighborRule,
    NeighborSet, RegionMask,
};
use crate::tensor::{ConvGeometry, Graph, Mode, ParamStore, Session, Shape, Tensor, Var};

use super::config::NetworkConfig;
use super::layers::{decode, EncoderLayer, HourglassUnit, UnitFeatures};

/// Predictions are clamped to at least this depth when converted to maps.
pub const MIN_PREDICTED_DEPTH: f64 = 1e-3;

/// Batched network inputs.
#[derive(Clone, Debug)]
pub struct NetInput {
    /// `(B, 3, H, W)`.
    pub rgb: Tensor,
    /// `(B, P, H, W)` one-hot region planes.
    pub semantic: Tensor,
    /// `(B, 2, H, W)`: scaled sparse depth and its validity.
    pub sparse: Tensor,
    pub masks: Vec<RegionMask>,
    /// Propagation neighbors per batch item.
    pub neighbors: Vec<NeighborSet>,
}

impl NetInput {
    pub fn batch(&self) -> usize {
        self.rgb.shape().n
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.rgb.shape();
        (s.h, s.w)
    }
}

/// `(B, planes, H, W)` indicator planes; label `l` lights plane `l` and
/// labels `>= planes` light none.
pub fn one_hot_regions(masks: &[RegionMask], planes: usize) -> Result<Tensor> {
    let (h, w) = masks
        .first()
        .ok_or_else(|| Error::Usage("one-hot encoding of an empty batch".into()))?
        .dims();
    if masks.iter().any(|m| m.dims() != (h, w)) {
        return Err(dim_err("one_hot_regions", "masks in a batch must share height and width"));
    }
    let hw = h * w;
    let mut data = vec![0.0; masks.len() * planes * hw];
    for (n, m) in masks.iter().enumerate() {
        for (p, &l) in m.labels().iter().enumerate() {
            if (l as usize) < planes {
                data[(n * planes + l as usize) * hw + p] = 1.0;
            }
        }
    }
    Tensor::new(Shape::new(masks.len(), planes, h, w), data)
}

/// All branch features of one forward pass.
#[derive(Clone, Debug)]
pub struct BranchState<'g> {
    /// One entry per image hourglass unit.
    pub image: Vec<UnitFeatures<'g>>,
    pub semantic: UnitFeatures<'g>,
    pub depth: UnitFeatures<'g>,
    /// Fused guidance output `d_j` for levels `1..levels`.
    pub guided: Vec<Var<'g>>,
}

#[derive(Clone, Debug)]
pub struct NetOutput<'g> {
    /// `(B, 1, H, W)` prediction before propagation.
    pub coarse: Var<'g>,
    /// `(B, 1, H, W)` propagated prediction.
    pub refined: Var<'g>,
    /// Nonnegative `(B, K, H, W)` affinities; each pixel's sum is below 1.
    pub affinity: Var<'g>,
    pub state: BranchState<'g>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every semantic feature with zeros.
    pub ablate_semantic: bool,
}

#[derive(Clone, Debug)]
pub struct ImageBranch {
    pub stem: Conv,
    pub units: Vec<HourglassUnit>,
}

#[derive(Clone, Debug)]
pub struct SemanticBranch {
    pub stem: Conv,
    pub unit: HourglassUnit,
}

#[derive(Clone, Debug)]
pub struct DepthBranch {
    pub stem: Conv,
    pub encoders: Vec<EncoderLayer>,
    /// Guidance at levels `1..levels`.
    pub guidance: Vec<RgParams>,
    pub bottleneck: EncoderLayer,
    pub ups: Vec<UpBlock>,
    pub head: Conv,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub image: ImageBranch,
    pub semantic: SemanticBranch,
    pub depth: DepthBranch,
    /// Features of both level-1 decoders → one logit per neighbor slot plus
    /// one for staying put.
    pub affinity: Conv,
}

fn stem(name: &str, cin: usize, cout: usize) -> Conv {
    Conv::new(name, cin, cout, 3, ConvGeometry::same(3))
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let hg = &config.hourglass;
        let ch = hg.channels();
        let levels = hg.levels;
        let c1 = ch[0];

        let image = ImageBranch {
            stem: stem("img.stem", 3, c1),
            units: (1..=hg.num_units)
                .map(|i| HourglassUnit::new(&format!("img.u{i}"), i, &ch, i == 1))
                .collect(),
        };
        let semantic = SemanticBranch {
            stem: stem("sem.stem", hg.semantic_planes, c1),
            unit: HourglassUnit::new("sem.u1", 1, &ch, true),
        };
        let guidance = (0..levels - 1)
            .map(|j| RgParams::new(&format!("dep.rg{}", j + 1), ch[j], hg.repetitions))
            .collect::<Result<Vec<_>>>()?;
        let depth = DepthBranch {
            stem: stem("dep.stem", 2, c1),
            encoders: (0..levels)
                .map(|j| {
                    let stride = if j == 0 { 1 } else { 2 };
                    EncoderLayer::new(&format!("dep.enc{}", j + 1), ch[j.saturating_sub(1)], ch[j], stride, true)
                })
                .collect(),
            guidance,
            bottleneck: EncoderLayer::new("dep.mid", ch[levels - 1], ch[levels - 1], 1, true),
            ups: (0..levels - 1)
                .map(|j| UpBlock::new(&format!("dep.up{}", j + 1), ch[j + 1], ch[j]))
                .collect(),
            head: stem("dep.head", c1, 1),
        };
        let slots = rule_slots(config.spn.rule);
        let affinity = stem("spn.affinity", 2 * c1, slots + 1);
        Ok(Network {
            config,
            image,
            semantic,
            depth,
            affinity,
        })
    }

    /// Fills `store` with freshly initialised parameters and buffers.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.image.stem.init(store, rng);
        for u in &self.image.units {
            u.init(store, rng);
        }
        self.semantic.stem.init(store, rng);
        self.semantic.unit.init(store, rng);
        let d = &self.depth;
        d.stem.init(store, rng);
        for e in &d.encoders {
            e.init(store, rng);
        }
        for g in &d.guidance {
            g.init(store, rng);
        }
        d.bottleneck.init(store, rng);
        for u in &d.ups {
            u.init(store, rng);
        }
        d.head.init(store, rng);
        self.affinity.init(store, rng);
    }

    pub fn init_store(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.init(&mut store, rng);
        store
    }

    /// Neighbor sets for one region mask under the configured rule.
    pub fn neighbors_for(&self, mask: &RegionMask) -> Result<NeighborSet> {
        let (h, w) = mask.dims();
        Ok(match self.config.spn.rule {
            NeighborRule::SpnDirection(d) => neighbors_spn(d, h, w),
            NeighborRule::Cspn => neighbors_cspn(h, w),
            NeighborRule::Raspn => neighbors_raspn(&neighbors_cspn(h, w), mask, self.config.spn.dilation)?,
        })
    }

    /// Stacks one batch. `rgb` holds `(1, 3, H, W)` images.
    pub fn prepare(&self, rgb: &[&Tensor], masks: &[RegionMask], sparse: &[DepthMap]) -> Result<NetInput> {
        let b = rgb.len();
        if b == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        if masks.len() != b || sparse.len() != b {
            return Err(dim_err(
                "prepare",
                format!("{b} images, {} masks and {} sparse maps", masks.len(), sparse.len()),
            ));
        }
        let s0 = rgb[0].shape();
        let (h, w) = (s0.h, s0.w);
        let m = self.config.hourglass.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} is not a multiple of {m} in both dimensions"
            )));
        }
        for k in 0..b {
            if rgb[k].shape() != Shape::new(1, 3, h, w) {
                return Err(dim_err("prepare", format!("image {k} is {}, expected (1, 3, {h}, {w})", rgb[k].shape())));
            }
            if masks[k].dims() != (h, w) || sparse[k].dims() != (h, w) {
                return Err(dim_err("prepare", format!("mask or sparse depth {k} is not {h}x{w}")));
            }
        }
        let scale = self.config.hourglass.depth_scale;
        let hw = h * w;
        let mut depth = vec![0.0; b * 2 * hw];
        for (k, d) in sparse.iter().enumerate() {
            for p in 0..hw {
                if d.valid()[p] {
                    depth[k * 2 * hw + p] = d.values()[p] / scale;
                    depth[(k * 2 + 1) * hw + p] = 1.0;
                }
            }
        }
        Ok(NetInput {
            rgb: Tensor::stack(&rgb.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?,
            semantic: one_hot_regions(masks, self.config.hourglass.semantic_planes)?,
            sparse: Tensor::new(Shape::new(b, 2, h, w), depth)?,
            masks: masks.to_vec(),
            neighbors: masks.iter().map(|m| self.neighbors_for(m)).collect::<Result<_>>()?,
        })
    }

    pub fn image_forward<'g>(&self, s: &Session<'g>, rgb: Var<'g>) -> Result<Vec<UnitFeatures<'g>>> {
        let mut input = self.image.stem.forward(s, rgb)?;
        let mut units: Vec<UnitFeatures<'g>> = Vec::with_capacity(self.image.units.len());
        for unit in &self.image.units {
            let f = unit.forward(s, input, &units)?;
            input = f.decoders[0];
            units.push(f);
        }
        Ok(units)
    }

    pub fn semantic_forward<'g>(&self, s: &Session<'g>, planes: Var<'g>) -> Result<UnitFeatures<'g>> {
        let x = self.semantic.stem.forward(s, planes)?;
        self.semantic.unit.forward(s, x, &[])
    }

    /// Depth branch with guidance at every level but the deepest. Returns the
    /// coarse depth in input units, the branch features and each `d_j`.
    pub fn depth_forward<'g>(
        &self,
        s: &Session<'g>,
        sparse: Var<'g>,
        image: &UnitFeatures<'g>,
        semantic: &UnitFeatures<'g>,
    ) -> Result<(Var<'g>, UnitFeatures<'g>, Vec<Var<'g>>)> {
        let d = &self.depth;
        let levels = d.encoders.len();
        if image.decoders.len() != levels || semantic.decoders.len() != levels {
            return Err(Error::Usage(format!("guidance features must cover all {levels} levels")));
        }
        let mut encoders = vec![d.encoders[0].forward(s, d.stem.forward(s, sparse)?)?];
        let mut guided = Vec::with_capacity(levels - 1);
        for j in 0..levels - 1 {
            let (fused, _) = rg_module(s, image.decoders[j], semantic.decoders[j], encoders[j], &d.guidance[j])?;
            guided.push(fused);
            let mut next = d.encoders[j + 1].forward(s, fused)?;
            if j + 1 == levels - 1 {
                next = next.add(image.decoders[levels - 1])?;
            }
            encoders.push(next);
        }
        let decoders = decode(s, &d.bottleneck, &d.ups, &encoders)?;
        let coarse = d.head.forward(s, decoders[0])?.scale(self.config.hourglass.depth_scale);
        Ok((coarse, UnitFeatures { encoders, decoders }, guided))
    }

    pub fn forward<'g>(&self, s: &Session<'g>, input: &NetInput, opts: ForwardOptions) -> Result<NetOutput<'g>> {
        let g = s.graph();
        let image = self.image_forward(s, g.constant(input.rgb.clone()))?;
        let mut semantic = self.semantic_forward(s, g.constant(input.semantic.clone()))?;
        if opts.ablate_semantic {
            let zero = |v: &Var<'g>| g.constant(Tensor::zeros(v.shape()));
            semantic = UnitFeatures {
                encoders: semantic.encoders.iter().map(zero).collect(),
                decoders: semantic.decoders.iter().map(zero).collect(),
            };
        }
        let last = image.last().expect("at least one unit");
        let (coarse, depth, guided) = self.depth_forward(s, g.constant(input.sparse.clone()), last, &semantic)?;
        let logits = self
            .affinity
            .forward(s, Var::concat_channels(&[depth.decoders[0], semantic.decoders[0]])?)?;
        let slots = logits.shape().c - 1;
        // Drop the stay slot: a constant 1×1 selection of the first K channels.
        let select = g.constant(Tensor::from_fn(Shape::new(slots, slots + 1, 1, 1), |o, i, _, _| {
            if o == i {
                1.0
            } else {
                0.0
            }
        }));
        let weights = logits.channel_softmax().conv2d(select, None, ConvGeometry::new(1, 0))?;
        let spn = &self.config.spn;
        let affinity = normalize_affinity_batch(weights, &input.neighbors, spn.gamma)?;
        let refined = propagate_batch(coarse, &input.neighbors, affinity, spn.iterations)?;
        Ok(NetOutput {
            coarse,
            refined,
            affinity,
            state: BranchState {
                image,
                semantic,
                depth,
                guided,
            },
        })
    }

    /// Inference-mode `(coarse, refined)` predictions for a batch.
    pub fn predict(&self, store: &ParamStore, input: &NetInput) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::Eval);
        let out = self.forward(&s, input, ForwardOptions::default())?;
        Ok((out.coarse.value(), out.refined.value()))
    }
}

fn rule_slots(rule: NeighborRule) -> usize {
    let probe = match rule {
        NeighborRule::SpnDirection(d) => neighbors_spn(d, 1, 1),
        NeighborRule::Cspn | NeighborRule::Raspn => neighbors_cspn(1, 1),
    };
    probe.slots()
}

/// Runs every branch and the propagation refinement on one scene and
/// returns the refined depth.
pub fn rignetpp_forward(
    net: &Network,
    store: &ParamStore,
    rgb: &Tensor,
    semantic: &RegionMask,
    sparse: &DepthMap,
) -> Result<DepthMap> {
    let input = net.prepare(&[rgb], std::slice::from_ref(semantic), std::slice::from_ref(sparse))?;
    let (_, refined) = net.predict(store, &input)?;
    DepthMap::from_prediction(&refined, 0, MIN_PREDICTED_DEPTH)
}
