//! Finite-difference gradient suites at toy shapes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{loss_recons_var, sample_sparse, synth_scene, DepthMap, SamplePattern};
use crate::error::{Error, Result};
use crate::guidance::{af_fuse, eg_unit, rg_module, AfParams, EgParams, RgParams};
use crate::hourglass::{dense_aggregate, ForwardOptions, Network, NetworkConfig};
use crate::nn::PreActConv;
use crate::spn::{
    neighbors_cspn, neighbors_raspn, neighbors_spn, normalize_affinity, propagate, Direction, NeighborSet, RegionMask,
};
use crate::tensor::{
    grad_check_inputs, grad_check_params, ConvGeometry, GradCheckOptions, GradCheckReport, Graph, Mode, ParamStore,
    Session, Shape, Tensor, Var,
};

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const MODULE_TOL: f64 = 1e-5;
pub const FULL_TOL: f64 = 1e-4;
pub const FULL_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Modules,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Primitives, Scope::Modules, Scope::Full];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Primitives => "primitives",
            Scope::Modules => "modules",
            Scope::Full => "full",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Scope::ALL.iter().map(|c| c.name()).collect();
            Error::Usage(format!("unknown gradcheck scope {s:?}; valid scopes: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// `Σ probe ⊙ v` with a fixed random probe, so every output entry matters.
fn probe<'g>(v: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let p = random(v.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(v.mul(v.graph().constant(p))?.sum())
}

type Scalar = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Scalar)> {
    let x = Shape::new(2, 3, 5, 5);
    let c = Shape::new(1, 3, 1, 1);
    vec![
        (
            "conv2d",
            vec![random(x, rng), random(Shape::new(4, 3, 3, 3), rng), random(Shape::new(1, 4, 1, 1), rng)],
            Box::new(|_, v| probe(v[0].conv2d(v[1], Some(v[2]), ConvGeometry::new(2, 1))?, 1)),
        ),
        (
            "transposed_conv2d",
            vec![random(x, rng), random(Shape::new(3, 2, 3, 3), rng), random(Shape::new(1, 2, 1, 1), rng)],
            Box::new(|_, v| probe(v[0].transposed_conv2d(v[1], Some(v[2]), ConvGeometry::up(3))?, 2)),
        ),
        (
            "depthwise_conv2d",
            vec![random(x, rng), random(Shape::new(3, 1, 3, 3), rng), random(c, rng)],
            Box::new(|_, v| probe(v[0].depthwise_conv2d(v[1], Some(v[2]), ConvGeometry::same(3))?, 3)),
        ),
        ("relu", vec![random(x, rng)], Box::new(|_, v| probe(v[0].relu(), 4))),
        ("sigmoid", vec![random(x, rng)], Box::new(|_, v| probe(v[0].sigmoid(), 16))),
        (
            "add_sub_mul",
            vec![random(x, rng), random(x, rng)],
            Box::new(|_, v| probe(v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.scale(0.5).add_scalar(0.1), 5)),
        ),
        (
            "add_n",
            vec![random(x, rng), random(x, rng), random(x, rng)],
            Box::new(|_, v| probe(Var::add_n(v)?, 6)),
        ),
        (
            "concat_channels",
            vec![random(x, rng), random(Shape::new(2, 1, 5, 5), rng)],
            Box::new(|_, v| probe(Var::concat_channels(v)?, 7)),
        ),
        ("global_avg_pool", vec![random(x, rng)], Box::new(|_, v| probe(v[0].global_avg_pool(), 8))),
        ("channel_softmax", vec![random(x, rng)], Box::new(|_, v| probe(v[0].channel_softmax(), 9))),
        (
            "channel_scale",
            vec![random(x, rng), random(Shape::new(2, 3, 1, 1), rng)],
            Box::new(|_, v| probe(v[0].channel_scale(v[1])?, 10)),
        ),
        (
            "channel_mix",
            vec![random(x, rng), random(Shape::new(2, 3, 3, 1), rng)],
            Box::new(|_, v| probe(v[0].channel_mix(v[1])?, 11)),
        ),
        (
            "weighted_sum",
            vec![random(x, rng), random(x, rng), random(Shape::new(2, 2, 1, 1), rng)],
            Box::new(|_, v| probe(Var::weighted_sum(&v[..2], v[2])?, 12)),
        ),
        (
            "batch_norm_train",
            vec![random(x, rng), random(c, rng), random(c, rng)],
            Box::new(|_, v| probe(v[0].batch_norm_train(v[1], v[2])?.0, 13)),
        ),
        (
            "batch_norm_eval",
            vec![random(x, rng), random(c, rng), random(c, rng)],
            Box::new(|_, v| probe(v[0].batch_norm_eval(v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0])?, 14)),
        ),
        (
            "reshape_mean",
            vec![random(x, rng)],
            Box::new(|_, v| Ok(v[0].reshape(Shape::new(2, 75, 1, 1))?.mul(v[0].reshape(Shape::new(2, 75, 1, 1))?)?.mean())),
        ),
        (
            "masked_mse",
            vec![random(x, rng)],
            Box::new(|_, v| {
                let target = random(v[0].shape(), &mut ChaCha8Rng::seed_from_u64(15));
                let valid: Vec<bool> = (0..v[0].shape().numel()).map(|i| i % 3 != 0).collect();
                v[0].masked_mse(&target, &valid)
            }),
        ),
    ]
}

fn run_primitives(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default().with_tol(PRIMITIVE_TOL);
    primitive_cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = grad_check_inputs(|g, v| f(g, v), &inputs, opts)?;
            Ok(SuiteResult {
                name: name.to_string(),
                report,
            })
        })
        .collect()
}

fn init_store(init: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng), seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    store
}

fn run_modules(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default().with_tol(MODULE_TOL);
    let feat = Shape::new(2, 2, 4, 4);
    let three: Vec<Tensor> = (0..3).map(|_| random(feat, &mut rng)).collect();
    let mut out = Vec::new();

    let eg = EgParams::new("eg", 2);
    let store = init_store(|s, r| eg.init(s, r), seed + 1);
    out.push(SuiteResult {
        name: "eg_unit".into(),
        report: grad_check_params(&store, &three, |s, v| probe(eg_unit(s, v[0], v[1], v[2], &eg)?, 21), opts)?,
    });

    let rg = RgParams::new("rg", 2, 3)?;
    let store = init_store(|s, r| rg.init(s, r), seed + 2);
    out.push(SuiteResult {
        name: "rg_module(k=3)".into(),
        report: grad_check_params(&store, &three, |s, v| probe(rg_module(s, v[0], v[1], v[2], &rg)?.0, 22), opts)?,
    });

    let af = AfParams::new("af", 2, 3);
    let store = init_store(|s, r| af.init(s, r), seed + 3);
    out.push(SuiteResult {
        name: "af_fuse(k=3)".into(),
        report: grad_check_params(&store, &three, |s, v| probe(af_fuse(s, v, &af)?.0, 23), opts)?,
    });

    let dense = PreActConv::new("dense", 2);
    let store = init_store(|s, r| dense.init(s, r), seed + 4);
    out.push(SuiteResult {
        name: "dense_aggregate".into(),
        report: grad_check_params(&store, &three[..2], |s, v| probe(dense_aggregate(s, &dense, v)?, 24), opts)?,
    });

    let (h, w) = (5, 5);
    let mask = RegionMask::from_fn(h, w, |y, x| u32::from(y + x >= 5));
    let rules: Vec<(&str, NeighborSet)> = vec![
        ("propagate(spn,T=3)", neighbors_spn(Direction::L2R, h, w)),
        ("propagate(cspn,T=3)", neighbors_cspn(h, w)),
        ("propagate(raspn,T=3)", neighbors_raspn(&neighbors_cspn(h, w), &mask, 1)?),
    ];
    for (name, nbrs) in rules {
        let x0 = random(Shape::new(2, 1, h, w), &mut rng);
        let aff = random(Shape::new(2, nbrs.slots(), h, w), &mut rng);
        let report = grad_check_inputs(
            |_, v| probe(propagate(v[0], &nbrs, normalize_affinity(v[1], &nbrs, 1.0)?, 3)?, 25),
            &[x0, aff],
            opts,
        )?;
        out.push(SuiteResult {
            name: name.into(),
            report,
        });
    }
    Ok(out)
}

/// Configuration of the full-network check: two units, `k = 2`, 16×16.
pub fn full_check_config() -> NetworkConfig {
    let mut cfg = NetworkConfig::default();
    cfg.hourglass.num_units = 2;
    cfg.hourglass.repetitions = 2;
    cfg
}

fn refined_loss<'g>(
    net: &Network,
    s: &Session<'g>,
    input: &crate::hourglass::NetInput,
    gt: &[DepthMap],
) -> Result<Var<'g>> {
    loss_recons_var(net.forward(s, input, ForwardOptions::default())?.refined, gt)
}

/// Reconstruction loss of the whole network on two 16×16 scenes, checked
/// against every parameter tensor at `per_tensor` sampled coordinates with a
/// five-point stencil of step `FULL_STEP`. The loss is divided by its base
/// value.
pub fn full_network_check(seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let net = Network::new(full_check_config())?;
    let store = net.init_store(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rgb = Vec::new();
    let mut masks = Vec::new();
    let mut sparse = Vec::new();
    let mut gt = Vec::new();
    for i in 0..2 {
        let scene = synth_scene(seed + 100 + i, 16, 16, 4)?;
        sparse.push(sample_sparse(&scene.depth, SamplePattern::Uniform { n: 32 }, seed + 200 + i)?);
        masks.push(scene.mask.clone());
        gt.push(scene.depth.clone());
        rgb.push(scene.rgb);
    }
    let input = net.prepare(&rgb.iter().collect::<Vec<_>>(), &masks, &sparse)?;
    let g = Graph::new();
    let base = refined_loss(&net, &Session::new(&g, &store, Mode::Train), &input, &gt)?
        .value()
        .item()?;
    grad_check_params(
        &store,
        &[],
        |s, _| Ok(refined_loss(&net, s, &input, &gt)?.scale(1.0 / base)),
        GradCheckOptions::default()
            .five_point()
            .with_step(FULL_STEP)
            .with_tol(FULL_TOL)
            .sampled(per_tensor, seed),
    )
}

pub fn run_gradcheck_suite(scope: Scope) -> Result<Vec<SuiteResult>> {
    match scope {
        Scope::Primitives => run_primitives(7),
        Scope::Modules => run_modules(11),
        Scope::Full => Ok(vec![SuiteResult {
            name: "network(16x16)".into(),
            report: full_network_check(13, 2)?,
        }]),
    }
}
