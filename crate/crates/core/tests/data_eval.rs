mod common;

use common::rng;
use densify_core::data::io::{
    decode_depth_pgm, decode_mask_pgm, decode_pfm, encode_depth_pgm, encode_mask_pgm, encode_pfm, metrics_csv,
    parse_metrics_csv, read_metrics_csv, read_pfm, write_metrics_csv, write_pfm,
};
use densify_core::data::{
    compute_metrics, density_stats, loss_recons, loss_recons_var, sample_mask, sample_sparse, synth_scene, DepthMap,
    MetricsReport, SamplePattern, MAX_OBJECTS, MIN_SEPARATION,
};
use densify_core::spn::RegionMask;
use densify_core::{Error, Graph, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn pair(gt: &[f64], pred: &[f64]) -> (DepthMap, DepthMap) {
    let n = gt.len();
    (
        DepthMap::dense(1, n, gt.to_vec()).unwrap(),
        DepthMap::dense(1, n, pred.to_vec()).unwrap(),
    )
}

fn random_map(h: usize, w: usize, valid_frac: f64, r: &mut ChaCha8Rng) -> DepthMap {
    let values = (0..h * w).map(|_| r.gen_range(0.5..20.0)).collect();
    let valid = (0..h * w).map(|_| r.gen_bool(valid_frac)).collect();
    DepthMap::new(h, w, values, valid).unwrap()
}

#[test]
fn scenes_are_deterministic() {
    let a = synth_scene(7, 32, 48, 5).unwrap();
    let b = synth_scene(7, 32, 48, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(encode_pfm(&a.depth), encode_pfm(&b.depth));
    assert_ne!(a, synth_scene(8, 32, 48, 5).unwrap());
}

#[test]
fn empty_scene_is_a_plane() {
    let s = synth_scene(1, 16, 16, 0).unwrap();
    let d0 = s.depth.values()[0];
    assert!(s.depth.values().iter().all(|&v| v == d0));
    assert!(s.mask.labels().iter().all(|&l| l == 0));
    assert_eq!(s.depth.valid_count(), 256);
}

#[test]
fn scene_borders_have_the_minimum_depth_gap() {
    for seed in 0..20 {
        let objects = 1 + seed as usize % 8;
        let s = synth_scene(seed, 32, 32, objects).unwrap();
        let (h, w) = (32, 32);
        let mut labels: Vec<u32> = s.mask.labels().to_vec();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, (0..=objects as u32).collect::<Vec<_>>());
        for y in 0..h {
            for x in 0..w {
                for (ny, nx) in [(y + 1, x), (y, x + 1)] {
                    if ny < h && nx < w && s.mask.label(y, x) != s.mask.label(ny, nx) {
                        let gap = (s.depth.get(y, x).unwrap() - s.depth.get(ny, nx).unwrap()).abs();
                        assert!(gap >= MIN_SEPARATION - 1e-12, "seed {seed}: gap {gap}");
                    }
                }
            }
        }
        assert!(s.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.rgb.shape(), Shape::new(1, 3, h, w));
    }
}

#[test]
fn scene_rejects_bad_requests() {
    assert!(matches!(synth_scene(0, 30, 32, 1), Err(Error::Config(_))));
    assert!(matches!(synth_scene(0, 32, 32, MAX_OBJECTS + 1), Err(Error::Config(_))));
}

#[test]
fn uniform_sampler_counts() {
    let gt = DepthMap::dense(228, 304, vec![5.0; 228 * 304]).unwrap();
    let s = sample_sparse(&gt, SamplePattern::Uniform { n: 500 }, 3).unwrap();
    assert_eq!(s.valid_count(), 500);
    assert!(matches!(
        sample_sparse(&gt, SamplePattern::Uniform { n: 228 * 304 + 1 }, 3),
        Err(Error::Config(_))
    ));
}

#[test]
fn grid_sampler_counts() {
    let gt = DepthMap::dense(8, 8, vec![1.0; 64]).unwrap();
    let s = sample_sparse(&gt, SamplePattern::Grid { sy: 2, sx: 2 }, 0).unwrap();
    assert_eq!(s.valid_count(), 16);
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(s.get(y, x).is_some(), y % 2 == 0 && x % 2 == 0);
        }
    }
    let gt = DepthMap::dense(13, 30, vec![1.0; 390]).unwrap();
    let s = sample_sparse(&gt, SamplePattern::Grid { sy: 2, sx: 8 }, 0).unwrap();
    assert_eq!(s.valid_count(), 7 * 4);
}

#[test]
fn samplers_are_deterministic_per_seed() {
    for p in [
        SamplePattern::Uniform { n: 300 },
        SamplePattern::Gaussian { n: 300, sigma: 8.0 },
        SamplePattern::Grid { sy: 3, sx: 5 },
    ] {
        let a = sample_mask((40, 50), p, 11).unwrap();
        assert_eq!(a, sample_mask((40, 50), p, 11).unwrap());
        assert_eq!(a, sample_mask((40, 50), p, 11).unwrap());
        if let SamplePattern::Gaussian { n, .. } | SamplePattern::Uniform { n } = p {
            assert_eq!(a.iter().filter(|&&b| b).count(), n);
            assert_ne!(a, sample_mask((40, 50), p, 12).unwrap());
        }
    }
}

#[test]
fn wide_gaussian_sampler_is_uniform() {
    let (h, w, n) = (128, 128, 10_000);
    let mask = sample_mask((h, w), SamplePattern::Gaussian { n, sigma: 1e9 }, 5).unwrap();
    let mut bins = [0f64; 16];
    for (i, &k) in mask.iter().enumerate() {
        if k {
            bins[(i / w) / 32 * 4 + (i % w) / 32] += 1.0;
        }
    }
    let e = n as f64 / 16.0;
    let chi2: f64 = bins.iter().map(|o| (o - e) * (o - e) / e).sum();
    let p = 1.0 - ChiSquared::new(15.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2} p {p}");
}

#[test]
fn narrow_gaussian_sampler_concentrates_at_the_centre() {
    let (h, w) = (64, 64);
    let spread = |mask: &[bool]| {
        let pts: Vec<f64> = mask
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| ((i / w) as f64 - 31.5).hypot((i % w) as f64 - 31.5))
            .collect();
        pts.iter().sum::<f64>() / pts.len() as f64
    };
    let g = sample_mask((h, w), SamplePattern::Gaussian { n: 200, sigma: 8.0 }, 1).unwrap();
    let u = sample_mask((h, w), SamplePattern::Uniform { n: 200 }, 1).unwrap();
    assert!(spread(&g) < 0.6 * spread(&u));
    assert!(matches!(
        sample_mask((h, w), SamplePattern::Gaussian { n: 5, sigma: 0.0 }, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn pattern_strings_round_trip() {
    for p in [
        SamplePattern::Uniform { n: 500 },
        SamplePattern::Gaussian { n: 20, sigma: 2.5 },
        SamplePattern::Grid { sy: 2, sx: 8 },
    ] {
        assert_eq!(p.to_string().parse::<SamplePattern>().unwrap(), p);
    }
    assert!(matches!("blob:3".parse::<SamplePattern>(), Err(Error::Usage(_))));
}

#[test]
fn tile_densities() {
    let full = DepthMap::dense(16, 16, vec![3.0; 256]).unwrap();
    let st = density_stats(&full, 4, 10).unwrap();
    assert!(st.tile_density.iter().all(|&d| d == 1.0));
    assert_eq!(st.histogram[9], 16);
    let grid = sample_sparse(&full, SamplePattern::Grid { sy: 2, sx: 2 }, 0).unwrap();
    assert!(density_stats(&grid, 4, 4).unwrap().tile_density.iter().all(|&d| d == 0.25));
    assert!(matches!(density_stats(&full, 5, 4), Err(Error::Config(_))));
}

#[test]
fn uniform_tile_density_matches_binomial_expectation() {
    let (hw, n, tile, seeds) = (32 * 32, 100usize, 8usize, 400);
    let full = DepthMap::dense(32, 32, vec![3.0; hw]).unwrap();
    let p = n as f64 / hw as f64;
    let first: Vec<f64> = (0..seeds)
        .map(|s| {
            let d = sample_sparse(&full, SamplePattern::Uniform { n }, s).unwrap();
            let st = density_stats(&d, tile, 8).unwrap();
            assert!((st.mean_density() - p).abs() < 1e-12);
            st.tile_density[0]
        })
        .collect();
    let mean = first.iter().sum::<f64>() / seeds as f64;
    let se = (p * (1.0 - p) / (tile * tile) as f64 / seeds as f64).sqrt();
    assert!((mean - p).abs() <= 3.0 * se, "{mean} vs {p} (se {se})");
}

#[test]
fn loss_examples() {
    let (gt, pred) = pair(&[2.0, 4.0], &[1.0, 3.0]);
    assert_eq!(loss_recons(&pred, &gt).unwrap(), 1.0);
    assert_eq!(loss_recons(&gt, &gt).unwrap(), 0.0);
    let mut r = rng(1);
    let gt = random_map(6, 7, 0.5, &mut r);
    let plus = DepthMap::new(6, 7, gt.values().iter().map(|v| v + 1.0).collect(), gt.valid().to_vec()).unwrap();
    assert!((loss_recons(&plus, &gt).unwrap() - 1.0).abs() < 1e-12);
    let empty = DepthMap::empty(6, 7);
    assert!(matches!(loss_recons(&gt, &empty), Err(Error::Evaluation(_))));
}

#[test]
fn loss_gradient_matches_closed_form() {
    let mut r = rng(2);
    let gts: Vec<DepthMap> = (0..2).map(|_| random_map(5, 6, 0.4, &mut r)).collect();
    let pred = Tensor::from_fn(Shape::new(2, 1, 5, 6), |_, _, _, _| r.gen_range(0.0..10.0));
    let g = Graph::new();
    let x = g.leaf(pred.clone());
    let loss = loss_recons_var(x, &gts).unwrap();
    let grad = g.backward(loss).unwrap().wrt(x);
    let count: usize = gts.iter().map(|d| d.valid_count()).sum();
    for (n, gt) in gts.iter().enumerate() {
        for i in 0..30 {
            let got = grad.data()[n * 30 + i];
            if gt.valid()[i] {
                let want = 2.0 * (pred.data()[n * 30 + i] - gt.values()[i]) / count as f64;
                assert!((got - want).abs() < 1e-15);
            } else {
                assert_eq!(got, 0.0);
            }
        }
    }
}

#[test]
fn metric_examples() {
    let (gt, pred) = pair(&[2.0, 4.0], &[1.0, 3.0]);
    let m = compute_metrics(&pred, &gt).unwrap();
    assert!((m.mae - 1.0).abs() < 1e-12);
    assert!((m.rmse - 1.0).abs() < 1e-12);
    assert!((m.rel - 0.375).abs() < 1e-12);
    assert!((m.imae - (0.5 + 1.0 / 12.0) / 2.0).abs() < 1e-12);
    assert!((m.irmse - ((0.25 + 1.0 / 144.0) / 2.0f64).sqrt()).abs() < 1e-12);
    let l = (2f64.ln() - 1f64.ln()).powi(2) + (4f64.ln() - 3f64.ln()).powi(2);
    assert!((m.rmselog - (l / 2.0).sqrt()).abs() < 1e-12);

    let (gt, pred) = pair(&[1.0, 1.0], &[1.3, 1.0]);
    let m = compute_metrics(&pred, &gt).unwrap();
    assert_eq!((m.delta1, m.delta2, m.delta3), (50.0, 100.0, 100.0));

    let mut r = rng(3);
    let gt = random_map(8, 8, 0.7, &mut r);
    let m = compute_metrics(&gt, &gt).unwrap();
    assert_eq!([m.rel, m.mae, m.imae, m.rmse, m.irmse, m.rmselog], [0.0; 6]);
    assert_eq!((m.delta1, m.delta2, m.delta3), (100.0, 100.0, 100.0));
}

#[test]
fn metrics_need_positive_predictions() {
    let gt = DepthMap::dense(1, 2, vec![1.0, 2.0]).unwrap();
    let pred = DepthMap::new(1, 2, vec![1.0, 0.0], vec![true, false]).unwrap();
    match compute_metrics(&pred, &gt) {
        Err(Error::Evaluation(msg)) => assert!(msg.contains("inverse") && msg.contains("log")),
        other => panic!("expected evaluation error, got {other:?}"),
    }
    assert!(matches!(
        compute_metrics(&gt, &DepthMap::empty(1, 2)),
        Err(Error::Evaluation(_))
    ));
    assert!(matches!(
        compute_metrics(&gt, &DepthMap::empty(2, 1)),
        Err(Error::Dimension { .. })
    ));
    assert!(DepthMap::new(1, 1, vec![-1.0], vec![true]).is_err());
}

#[test]
fn deltas_are_monotone() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let gt = random_map(4, 5, 0.8, &mut r);
        if gt.valid_count() == 0 {
            continue;
        }
        let pred = DepthMap::dense(4, 5, (0..20).map(|_| r.gen_range(0.3..30.0)).collect()).unwrap();
        let m = compute_metrics(&pred, &gt).unwrap();
        assert!(0.0 <= m.delta1 && m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 100.0);
        assert!(m.to_array().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn metrics_ignore_invalid_pixels_and_order() {
    let mut r = rng(5);
    let gt = random_map(6, 6, 0.5, &mut r);
    let pred = DepthMap::dense(6, 6, (0..36).map(|_| r.gen_range(1.0..9.0)).collect()).unwrap();
    let base = compute_metrics(&pred, &gt).unwrap();
    // Change prediction values where the ground truth is invalid.
    let fuzzed: Vec<f64> = pred
        .values()
        .iter()
        .zip(gt.valid())
        .map(|(&v, &ok)| if ok { v } else { r.gen_range(1.0..1e6) })
        .collect();
    let fuzzed = DepthMap::dense(6, 6, fuzzed).unwrap();
    assert_eq!(compute_metrics(&fuzzed, &gt).unwrap(), base);

    let mut perm: Vec<usize> = (0..36).collect();
    perm.shuffle(&mut r);
    let gt_p = DepthMap::new(6, 6, perm.iter().map(|&i| gt.values()[i]).collect(), perm.iter().map(|&i| gt.valid()[i]).collect()).unwrap();
    let pred_p = DepthMap::dense(6, 6, perm.iter().map(|&i| pred.values()[i]).collect()).unwrap();
    let shuffled = compute_metrics(&pred_p, &gt_p).unwrap();
    for (a, b) in shuffled.to_array().iter().zip(base.to_array()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn pfm_round_trip() {
    let mut r = rng(6);
    let d = random_map(7, 9, 0.6, &mut r);
    let back = decode_pfm(&encode_pfm(&d)).unwrap();
    assert_eq!(back.valid(), d.valid());
    for (a, b) in back.values().iter().zip(d.values()) {
        assert!((a - b).abs() <= 1e-6 * b.abs());
    }
    let empty = DepthMap::empty(3, 4);
    assert_eq!(decode_pfm(&encode_pfm(&empty)).unwrap(), empty);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pfm");
    write_pfm(&path, &d).unwrap();
    assert_eq!(read_pfm(&path).unwrap().valid(), d.valid());
}

#[test]
fn pfm_rows_are_stored_bottom_up() {
    let d = DepthMap::dense(2, 1, vec![1.0, 2.0]).unwrap();
    let bytes = encode_pfm(&d);
    let header = b"Pf\n1 2\n-1.0\n".len();
    assert_eq!(&bytes[..header], b"Pf\n1 2\n-1.0\n");
    assert_eq!(&bytes[header..header + 4], &2f32.to_le_bytes());
}

#[test]
fn malformed_files_report_offsets() {
    match decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0") {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("{other:?}"),
    }
    match decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0") {
        Err(Error::Format { offset, detail }) => {
            assert_eq!(offset, 16);
            assert!(detail.contains("truncated"));
        }
        other => panic!("{other:?}"),
    }
    match decode_pfm(b"Pf\n2 x\n-1.0\n") {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 5),
        other => panic!("{other:?}"),
    }
    assert!(matches!(decode_mask_pgm(b"P5\n2 2\n65535\n\0\0"), Err(Error::Format { .. })));
}

#[test]
fn pgm_labels_and_depth() {
    let mask = RegionMask::from_fn(5, 3, |y, x| (y * 7 + x * 300) as u32);
    let bytes = encode_mask_pgm(&mask).unwrap();
    assert!(bytes.starts_with(b"P5\n# scale=1\n3 5\n65535\n"));
    assert_eq!(decode_mask_pgm(&bytes).unwrap(), mask);

    let d = DepthMap::new(1, 3, vec![1.25, 0.0, 80.5], vec![true, false, true]).unwrap();
    let back = decode_depth_pgm(&encode_depth_pgm(&d, 256.0).unwrap()).unwrap();
    assert_eq!(back, d);
    assert!(encode_depth_pgm(&d, 1000.0).is_err());
}

#[test]
fn metrics_csv_round_trip() {
    let rows: Vec<(String, MetricsReport)> = (0..4)
        .map(|i| {
            let v = i as f64;
            (format!("scene{i}"), MetricsReport::from_array([v, 0.1 * v, 1.0 / 3.0, v, v, v, 50.0, 75.0, 100.0]))
        })
        .collect();
    let text = metrics_csv(&rows);
    assert!(text.starts_with("scene,rel,mae,imae,rmse,irmse,rmselog,d1,d2,d3\n"));
    assert_eq!(text.lines().count(), 5);
    assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &rows).unwrap();
    assert_eq!(read_metrics_csv(&path).unwrap().len(), 4);
    let header_len = "scene,rel,mae,imae,rmse,irmse,rmselog,d1,d2,d3\n".len();
    match parse_metrics_csv(&format!("{}a,1,2\n", &text[..header_len])) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, header_len),
        other => panic!("{other:?}"),
    }
    let mean = MetricsReport::mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>()).unwrap();
    assert!((mean.rel - 1.5).abs() < 1e-15);
}
