mod common;

use common::{naive_conv, random, rng};
use densify_core::guidance::{
    af_fuse, apply_dynamic_kernels, cf_reference, dc_reference, eg_unit, memory_cost, rg_module, AfParams,
    CfParams, DcParams, EgParams, GuidanceMethod, MemoryModel, MemoryReport, RgParams,
};
use densify_core::nn::SepConv;
use densify_core::tensor::{grad_check_inputs, GradCheckOptions, LayerParams, Mode, ParamStore, Session};
use densify_core::{Error, Graph, Shape, Tensor, Var};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn zero_all(store: &mut ParamStore) {
    for name in store.param_names() {
        let shape = store.get(&name).unwrap().shape();
        store.set(&name, Tensor::zeros(shape)).unwrap();
    }
}

fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for name in store.param_names() {
        let shape = store.get(&name).unwrap().shape();
        store.set(&name, random(shape, r)).unwrap();
    }
}

fn c1(values: &[f64]) -> Tensor {
    Tensor::new(Shape::new(1, values.len(), 1, 1), values.to_vec()).unwrap()
}

fn eval_eg(store: &ParamStore, p: &EgParams, img: &Tensor, sem: &Tensor, depth: &Tensor) -> Tensor {
    let g = Graph::new();
    let s = Session::new(&g, store, Mode::Eval);
    eg_unit(&s, g.constant(img.clone()), g.constant(sem.clone()), g.constant(depth.clone()), p)
        .unwrap()
        .value()
}

/// Separable conv evaluated with the brute-force convolution oracle.
fn naive_sep(store: &ParamStore, conv: &SepConv, x: &Tensor) -> Tensor {
    let s = x.shape();
    let dw = store.get(&conv.depthwise_name()).unwrap();
    let db = store.get(&conv.depthwise_bias_name()).unwrap();
    let k = conv.kernel;
    let planes: Vec<Tensor> = (0..s.c)
        .map(|c| {
            let plane = Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, xx| x.at(n, c, y, xx));
            let w = Tensor::from_fn(Shape::new(1, 1, k, k), |_, _, y, xx| dw.at(c, 0, y, xx));
            naive_conv(&plane, &w, Some(&c1(&[db.data()[c]])), 1, k / 2)
        })
        .collect();
    let stacked = Tensor::from_fn(Shape::new(s.n, s.c, s.h, s.w), |n, c, y, xx| planes[c].at(n, 0, y, xx));
    naive_conv(
        &stacked,
        store.get(&conv.pointwise_name()).unwrap(),
        Some(store.get(&conv.pointwise_bias_name()).unwrap()),
        1,
        0,
    )
}

/// Single-channel unit: output = m·g·depth with g the sigmoid of the pooled
/// concat conv and m the mixer conv of g.
fn oracle_eg_c1(store: &ParamStore, p: &EgParams, img: &Tensor, sem: &Tensor, depth: &Tensor) -> Tensor {
    let s = depth.shape();
    assert_eq!(s.c, 1);
    let stacked = Tensor::from_fn(Shape::new(s.n, 3, s.h, s.w), |n, c, y, x| match c {
        0 => img.at(n, 0, y, x),
        1 => sem.at(n, 0, y, x),
        _ => depth.at(n, 0, y, x),
    });
    let conv = naive_sep(store, &p.concat_conv, &stacked);
    let hw = (s.h * s.w) as f64;
    Tensor::from_fn(s, |n, _, y, x| {
        let g: f64 = (0..s.h)
            .flat_map(|yy| (0..s.w).map(move |xx| (yy, xx)))
            .map(|(yy, xx)| conv.at(n, 0, yy, xx))
            .sum::<f64>()
            / hw;
        let g = 1.0 / (1.0 + (-g).exp());
        let dwc = store.get(&p.mixer_conv.depthwise_name()).unwrap().at(0, 0, 1, 1);
        let db = store.get(&p.mixer_conv.depthwise_bias_name()).unwrap().data()[0];
        let pw = store.get(&p.mixer_conv.pointwise_name()).unwrap().data()[0];
        let pb = store.get(&p.mixer_conv.pointwise_bias_name()).unwrap().data()[0];
        let m = pw * (dwc * g + db) + pb;
        m * g * depth.at(n, 0, y, x)
    })
}

#[test]
fn eg_zero_parameters_give_zero_output() {
    let mut r = rng(1);
    let p = EgParams::new("eg", 4);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    zero_all(&mut store);
    let sh = Shape::new(2, 4, 5, 5);
    let out = eval_eg(&store, &p, &random(sh, &mut r), &random(sh, &mut r), &random(sh, &mut r));
    assert_eq!(out.max_abs(), 0.0);
}

#[test]
fn eg_single_channel_matches_closed_form() {
    let mut r = rng(2);
    let p = EgParams::new("eg", 1);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    randomize(&mut store, &mut r);
    let sh = Shape::new(1, 1, 2, 2);
    let (img, sem, depth) = (random(sh, &mut r), random(sh, &mut r), random(sh, &mut r));
    let got = eval_eg(&store, &p, &img, &sem, &depth);
    let want = oracle_eg_c1(&store, &p, &img, &sem, &depth);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn eg_preserves_shape() {
    let mut r = rng(3);
    let p = EgParams::new("eg", 8);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    let sh = Shape::new(1, 8, 16, 16);
    let out = eval_eg(&store, &p, &random(sh, &mut r), &random(sh, &mut r), &random(sh, &mut r));
    assert_eq!(out.shape(), sh);
}

#[test]
fn eg_parameter_shapes() {
    let p = EgParams::new("eg", 5);
    assert_eq!((p.concat_conv.cin, p.concat_conv.cout), (15, 5));
    assert_eq!((p.mixer_conv.cin, p.mixer_conv.cout), (5, 25));
}

#[test]
fn eg_rejects_mismatched_inputs() {
    let mut r = rng(4);
    let p = EgParams::new("eg", 2);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    let g = Graph::new();
    let s = Session::new(&g, &store, Mode::Eval);
    let a = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let b = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 5)));
    assert!(matches!(eg_unit(&s, a, a, b, &p), Err(Error::Dimension { .. })));
    let c3 = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    assert!(matches!(eg_unit(&s, c3, c3, c3, &p), Err(Error::Dimension { .. })));
}

#[test]
fn eg_is_linear_in_depth_when_depth_slice_is_cut() {
    let mut r = rng(5);
    let c = 3;
    let p = EgParams::new("eg", c);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    randomize(&mut store, &mut r);
    let dw_name = p.concat_conv.depthwise_name();
    let db_name = p.concat_conv.depthwise_bias_name();
    let dw = store.get(&dw_name).unwrap();
    let dw = Tensor::from_fn(dw.shape(), |o, i, y, x| if o >= 2 * c { 0.0 } else { dw.at(o, i, y, x) });
    let db = store.get(&db_name).unwrap();
    let db = Tensor::from_fn(db.shape(), |n, ch, y, x| if ch >= 2 * c { 0.0 } else { db.at(n, ch, y, x) });
    store.set(&dw_name, dw).unwrap();
    store.set(&db_name, db).unwrap();
    let sh = Shape::new(2, c, 6, 6);
    let (img, sem, depth) = (random(sh, &mut r), random(sh, &mut r), random(sh, &mut r));
    let once = eval_eg(&store, &p, &img, &sem, &depth);
    let twice = eval_eg(&store, &p, &img, &sem, &depth.map(|v| 2.0 * v));
    assert!(twice.max_abs_diff(&once.map(|v| 2.0 * v)).unwrap() < 1e-10);
}

fn run_rg(store: &ParamStore, p: &RgParams, img: &Tensor, sem: &Tensor, depth: &Tensor) -> (Tensor, Vec<Tensor>) {
    let g = Graph::new();
    let s = Session::new(&g, store, Mode::Eval);
    let (fused, steps) =
        rg_module(&s, g.constant(img.clone()), g.constant(sem.clone()), g.constant(depth.clone()), p).unwrap();
    (fused.value(), steps.iter().map(|v| v.value()).collect())
}

#[test]
fn rg_single_step_is_the_guidance_unit() {
    let mut r = rng(6);
    let p = RgParams::new("rg", 3, 1).unwrap();
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    randomize(&mut store, &mut r);
    let sh = Shape::new(2, 3, 5, 4);
    let (img, sem, depth) = (random(sh, &mut r), random(sh, &mut r), random(sh, &mut r));
    let (fused, steps) = run_rg(&store, &p, &img, &sem, &depth);
    assert_eq!(steps.len(), 1);
    assert_eq!(fused, steps[0]);
    let direct = eval_eg(&store, &p.steps[0].eg, &img, &sem, &depth);
    assert_eq!(fused, direct);
}

#[test]
fn rg_zero_depth_stays_zero() {
    let mut r = rng(7);
    let p = RgParams::new("rg", 2, 3).unwrap();
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    let sh = Shape::new(1, 2, 4, 4);
    let (fused, steps) = run_rg(&store, &p, &random(sh, &mut r), &random(sh, &mut r), &Tensor::zeros(sh));
    assert_eq!(steps.len(), 3);
    for s in &steps {
        assert_eq!(s.max_abs(), 0.0);
    }
    assert_eq!(fused.max_abs(), 0.0);
}

#[test]
fn rg_two_steps_match_unrolled_chain() {
    let mut r = rng(8);
    let p = RgParams::new("rg", 1, 2).unwrap();
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    randomize(&mut store, &mut r);
    let sh = Shape::new(1, 1, 3, 3);
    let (img, sem, depth) = (random(sh, &mut r), random(sh, &mut r), random(sh, &mut r));
    let (_, steps) = run_rg(&store, &p, &img, &sem, &depth);
    let d1 = oracle_eg_c1(&store, &p.steps[0].eg, &img, &sem, &depth);
    let img2 = naive_sep(&store, p.steps[1].image_conv.as_ref().unwrap(), &img);
    let sem2 = naive_sep(&store, p.steps[1].semantic_conv.as_ref().unwrap(), &sem);
    let d2 = oracle_eg_c1(&store, &p.steps[1].eg, &img2, &sem2, &d1);
    assert!(steps[0].max_abs_diff(&d1).unwrap() < 1e-12);
    assert!(steps[1].max_abs_diff(&d2).unwrap() < 1e-12);
}

#[test]
fn rg_rejects_zero_repetitions() {
    assert!(matches!(RgParams::new("rg", 2, 0), Err(Error::Config(_))));
}

#[test]
fn rg_steps_have_independent_parameters() {
    let p = RgParams::new("rg", 2, 3).unwrap();
    let mut store = ParamStore::new();
    p.init(&mut store, &mut rng(0));
    let names = store.param_names();
    assert!(names.iter().any(|n| n.starts_with("rg.step2.eg.")));
    assert!(names.iter().any(|n| n.starts_with("rg.step1.img.")));
    assert!(!names.iter().any(|n| n.starts_with("rg.step0.img.")));
    assert_eq!(p.af.weight_conv.cout, 3);
}

fn run_af(store: &ParamStore, p: &AfParams, steps: &[Tensor]) -> (Tensor, Tensor) {
    let g = Graph::new();
    let s = Session::new(&g, store, Mode::Eval);
    let vars: Vec<Var> = steps.iter().map(|t| g.constant(t.clone())).collect();
    let (out, alpha) = af_fuse(&s, &vars, p).unwrap();
    (out.value(), alpha.value())
}

/// Weight conv collapsed to its pointwise bias, so the logits are fixed.
fn fixed_logits(store: &mut ParamStore, p: &AfParams, logits: &[f64]) {
    zero_all(store);
    store.set(&p.weight_conv.pointwise_bias_name(), c1(logits)).unwrap();
}

#[test]
fn af_weighted_sum_by_hand() {
    let p = AfParams::new("af", 2, 2);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut rng(9));
    fixed_logits(&mut store, &p, &[0.0, 3f64.ln()]);
    let sh = Shape::new(1, 2, 3, 3);
    let (out, alpha) = run_af(&store, &p, &[Tensor::full(sh, 2.0), Tensor::full(sh, 4.0)]);
    assert!((alpha.data()[0] - 0.25).abs() < 1e-15 && (alpha.data()[1] - 0.75).abs() < 1e-15);
    assert!(out.max_abs_diff(&Tensor::full(sh, 3.5)).unwrap() < 1e-12);
}

#[test]
fn af_one_hot_selects_a_step() {
    let mut r = rng(10);
    let p = AfParams::new("af", 2, 3);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    fixed_logits(&mut store, &p, &[-1000.0, 0.0, -1000.0]);
    let sh = Shape::new(2, 2, 4, 4);
    let steps: Vec<Tensor> = (0..3).map(|_| random(sh, &mut r)).collect();
    let (out, _) = run_af(&store, &p, &steps);
    assert_eq!(out, steps[1]);
}

#[test]
fn af_identical_steps_pass_through() {
    let mut r = rng(11);
    let p = AfParams::new("af", 3, 3);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    randomize(&mut store, &mut r);
    let d = random(Shape::new(2, 3, 4, 4), &mut r);
    let (out, _) = run_af(&store, &p, &[d.clone(), d.clone(), d.clone()]);
    assert!(out.max_abs_diff(&d).unwrap() < 1e-12);
}

#[test]
fn af_rejects_empty_and_miscounted_lists() {
    let p = AfParams::new("af", 2, 2);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut rng(12));
    let g = Graph::new();
    let s = Session::new(&g, &store, Mode::Eval);
    assert!(matches!(af_fuse(&s, &[], &p), Err(Error::Usage(_))));
    let x = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
    assert!(matches!(af_fuse(&s, &[x], &p), Err(Error::Dimension { .. })));
}

#[test]
fn af_output_is_pointwise_convex() {
    let mut r = rng(13);
    for case in 0..100 {
        let k = 1 + case % 4;
        let c = 1 + case % 3;
        let p = AfParams::new("af", c, k);
        let mut store = ParamStore::new();
        p.init(&mut store, &mut r);
        randomize(&mut store, &mut r);
        let sh = Shape::new(1 + case % 2, c, 3, 4);
        let steps: Vec<Tensor> = (0..k).map(|_| random(sh, &mut r)).collect();
        let (out, alpha) = run_af(&store, &p, &steps);
        for b in 0..sh.n {
            let s: f64 = (0..k).map(|j| alpha.at(b, j, 0, 0)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for (i, v) in out.data().iter().enumerate() {
            let lo = steps.iter().map(|t| t.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = steps.iter().map(|t| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "case {case}: {v} outside [{lo}, {hi}]");
        }
    }
}

fn all_param_check(store: &ParamStore, inputs: Vec<Tensor>, build: impl for<'g> Fn(&Session<'g>, &[Var<'g>]) -> Densified<'g>) -> f64 {
    let names = store.param_names();
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
    let probe_shape = {
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::Eval);
        let vars: Vec<Var> = all[..n_in].iter().map(|t| g.constant(t.clone())).collect();
        build(&s, &vars).unwrap().shape()
    };
    let probe = random(probe_shape, &mut rng(99));
    let report = grad_check_inputs(
        |g, v| {
            let s = Session::new(g, store, Mode::Train);
            for (name, var) in names.iter().zip(&v[n_in..]) {
                s.bind(name, *var);
            }
            let out = build(&s, &v[..n_in])?;
            Ok(out.mul(g.constant(probe.clone()))?.sum())
        },
        &all,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked + report.flagged, all.iter().map(Tensor::numel).sum::<usize>());
    report.max_rel_error
}

type Densified<'g> = densify_core::Result<Var<'g>>;

#[test]
fn eg_unit_gradients() {
    let mut r = rng(14);
    let p = EgParams::new("eg", 2);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    randomize(&mut store, &mut r);
    let sh = Shape::new(2, 2, 4, 4);
    let inputs = vec![random(sh, &mut r), random(sh, &mut r), random(sh, &mut r)];
    all_param_check(&store, inputs, |s, v| eg_unit(s, v[0], v[1], v[2], &p));
}

#[test]
fn rg_module_gradients_with_three_steps() {
    let mut r = rng(15);
    let p = RgParams::new("rg", 2, 3).unwrap();
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    randomize(&mut store, &mut r);
    let sh = Shape::new(1, 2, 4, 4);
    let inputs = vec![random(sh, &mut r), random(sh, &mut r), random(sh, &mut r)];
    all_param_check(&store, inputs, |s, v| Ok(rg_module(s, v[0], v[1], v[2], &p)?.0));
}

#[test]
fn af_fuse_gradients() {
    let mut r = rng(16);
    let p = AfParams::new("af", 2, 3);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    randomize(&mut store, &mut r);
    let sh = Shape::new(2, 2, 3, 3);
    let inputs = (0..3).map(|_| random(sh, &mut r)).collect();
    all_param_check(&store, inputs, |s, v| Ok(af_fuse(s, v, &p)?.0));
}

#[test]
fn memory_matches_table_values() {
    let dc = memory_cost(GuidanceMethod::DC, 128, 128, 608, 3).unwrap();
    let cf = memory_cost(GuidanceMethod::CF, 128, 128, 608, 3).unwrap();
    let eg = memory_cost(GuidanceMethod::EG, 128, 128, 608, 3).unwrap();
    assert_eq!(dc.elements, 128 * 128 * 9 * 128 * 608);
    assert_eq!(dc.gigabytes, 42.75);
    assert!((cf.gigabytes - 0.334).abs() < 5e-4);
    assert!((eg.gigabytes - 0.037).abs() < 5e-4);
    assert_eq!(dc.bytes, dc.elements * 4);
    let report = MemoryModel::new(128, 128, 608, 3).unwrap().report().unwrap();
    assert!((report.displayed_ratio(GuidanceMethod::DC) - 1155.0).abs() <= 1.0);
    assert_eq!(report.displayed_ratio(GuidanceMethod::CF).round(), 9.0);
    assert_eq!(report.row(GuidanceMethod::CF).ratio_vs_eg.round(), 9.0);
    assert_eq!(report.row(GuidanceMethod::EG).ratio_vs_eg, 1.0);
}

#[test]
fn memory_unit_dimensions() {
    let e = |m| memory_cost(m, 1, 1, 1, 1).unwrap().elements;
    assert_eq!(
        (e(GuidanceMethod::DC), e(GuidanceMethod::CF), e(GuidanceMethod::EG)),
        (1, 2, 2)
    );
}

#[test]
fn memory_rejects_bad_dimensions() {
    assert!(matches!(memory_cost(GuidanceMethod::EG, 0, 4, 4, 3), Err(Error::Config(_))));
    assert!(matches!(memory_cost(GuidanceMethod::DC, 4, 4, 4, 2), Err(Error::Config(_))));
    assert!(matches!(memory_cost(GuidanceMethod::DC, u64::MAX, 4, 4, 3), Err(Error::Config(_))));
}

#[test]
fn memory_report_round_trips_through_csv() {
    let report = MemoryModel::new(128, 128, 608, 3).unwrap().report().unwrap();
    let parsed = MemoryReport::parse_csv(&report.to_csv()).unwrap();
    assert_eq!(parsed, report);
    let tampered = report.to_csv().replacen("11475615744", "11475615745", 1);
    assert!(MemoryReport::parse_csv(&tampered).is_err());
    assert!(report.to_text().contains("42.750"));
}

proptest! {
    #[test]
    fn memory_ordering_and_closed_forms(c in 2u64..512, h in 1u64..512, w in 1u64..1024, half in 0u64..4) {
        prop_assume!(h * w > 1);
        let r = 2 * half + 1;
        let m = MemoryModel::new(c, h, w, r).unwrap();
        let (dc, cf, eg) = (
            m.elements(GuidanceMethod::DC).unwrap(),
            m.elements(GuidanceMethod::CF).unwrap(),
            m.elements(GuidanceMethod::EG).unwrap(),
        );
        prop_assert!(eg <= cf && cf < dc);
        if r > 1 {
            prop_assert!(eg < cf);
        }
        prop_assert!(((eg as f64 / dc as f64) / m.eg_over_dc() - 1.0).abs() < 1e-14);
        prop_assert!(((eg as f64 / cf as f64) / m.eg_over_cf() - 1.0).abs() < 1e-14);
    }
}

fn eg_logged_elements(c: usize, h: usize, w: usize) -> usize {
    let mut r = rng(17);
    let p = EgParams::new("eg", c);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut r);
    let g = Graph::new();
    let s = Session::new(&g, &store, Mode::Eval);
    let sh = Shape::new(1, c, h, w);
    let x = g.constant(random(sh, &mut r));
    eg_unit(&s, x, x, x, &p).unwrap();
    let logged: usize = g.kernel_allocations().iter().map(|(_, n)| n).sum();
    logged
}

fn dc_params(c: usize, r: usize, rng: &mut ChaCha8Rng) -> DcParams {
    let o = c * c * r * r;
    DcParams {
        predictor: LayerParams::new(random(Shape::new(o, c, 1, 1), rng), Some(random(Shape::new(1, o, 1, 1), rng)), 1, 0),
        r,
    }
}

fn cf_params(c: usize, r: usize, rng: &mut ChaCha8Rng) -> CfParams {
    CfParams {
        channelwise: LayerParams::new(random(Shape::new(c * r * r, c, 1, 1), rng), None, 1, 0),
        mixer: LayerParams::new(random(Shape::new(c * c, c, 1, 1), rng), None, 1, 0),
        r,
    }
}

#[test]
fn instrumented_counts_equal_the_model() {
    let mut r = rng(18);
    for c in [1usize, 2, 4, 8] {
        for (h, w) in [(1, 1), (2, 3), (4, 4), (8, 5), (8, 8)] {
            for k in [1usize, 3, 5] {
                let sh = Shape::new(2, c, h, w);
                let (img, depth) = (random(sh, &mut r), random(sh, &mut r));
                let cost = |m| memory_cost(m, c as u64, h as u64, w as u64, k as u64).unwrap().elements as usize;
                let dc = dc_reference(&img, &depth, &dc_params(c, k, &mut r)).unwrap();
                assert_eq!(dc.kernel_elements, cost(GuidanceMethod::DC));
                let cf = cf_reference(&img, &depth, &cf_params(c, k, &mut r)).unwrap();
                assert_eq!(cf.kernel_elements, cost(GuidanceMethod::CF));
                assert_eq!(eg_logged_elements(c, h, w), cost(GuidanceMethod::EG));
            }
        }
    }
}

#[test]
fn cf_count_at_four_channels() {
    let mut r = rng(19);
    let sh = Shape::new(1, 4, 4, 4);
    let out = cf_reference(&random(sh, &mut r), &random(sh, &mut r), &cf_params(4, 3, &mut r)).unwrap();
    assert_eq!(out.kernel_elements, 592);
}

#[test]
fn dc_identity_kernels_return_depth() {
    let mut r = rng(20);
    let sh = Shape::new(1, 2, 2, 2);
    let depth = random(sh, &mut r);
    let eye = Tensor::from_fn(Shape::new(1, 4, 2, 2), |_, k, _, _| if k == 0 || k == 3 { 1.0 } else { 0.0 });
    assert_eq!(apply_dynamic_kernels(&depth, &eye, 1).unwrap(), depth);
    let params = DcParams {
        predictor: LayerParams::new(Tensor::zeros(Shape::new(4, 2, 1, 1)), Some(c1(&[1.0, 0.0, 0.0, 1.0])), 1, 0),
        r: 1,
    };
    let out = dc_reference(&random(sh, &mut r), &depth, &params).unwrap();
    assert_eq!(out.output, depth);
    assert_eq!(out.kernel_elements, 16);
}

#[test]
fn dc_scalar_field_is_elementwise_product() {
    let mut r = rng(21);
    let sh = Shape::new(2, 1, 3, 4);
    let depth = random(sh, &mut r);
    let field = random(sh, &mut r);
    let out = apply_dynamic_kernels(&depth, &field, 1).unwrap();
    let want = depth.zip_map(&field, |a, b| a * b).unwrap();
    assert!(out.max_abs_diff(&want).unwrap() < 1e-15);
}

#[test]
fn dc_spatial_kernels_match_shifted_sums() {
    let mut r = rng(22);
    let sh = Shape::new(1, 2, 4, 3);
    let depth = random(sh, &mut r);
    let kernels = random(Shape::new(1, 2 * 2 * 9, 4, 3), &mut r);
    let out = apply_dynamic_kernels(&depth, &kernels, 3).unwrap();
    let want = Tensor::from_fn(sh, |_, co, y, x| {
        let mut acc = 0.0;
        for ci in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if sy >= 0 && sx >= 0 && sy < 4 && sx < 3 {
                        acc += kernels.at(0, ((co * 2 + ci) * 3 + ky) * 3 + kx, y, x)
                            * depth.at(0, ci, sy as usize, sx as usize);
                    }
                }
            }
        }
        acc
    });
    assert!(out.max_abs_diff(&want).unwrap() < 1e-14);
}

#[test]
fn references_reject_mismatched_inputs() {
    let mut r = rng(23);
    let a = Tensor::zeros(Shape::new(1, 2, 3, 3));
    let b = Tensor::zeros(Shape::new(1, 2, 3, 4));
    assert!(matches!(dc_reference(&a, &b, &dc_params(2, 3, &mut r)), Err(Error::Dimension { .. })));
    assert!(matches!(cf_reference(&a, &b, &cf_params(2, 3, &mut r)), Err(Error::Dimension { .. })));
    let wrong = dc_params(3, 3, &mut r);
    assert!(matches!(dc_reference(&a, &a, &wrong), Err(Error::Dimension { .. })));
}
