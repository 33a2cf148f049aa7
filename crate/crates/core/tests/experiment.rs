use densify_core::data::io::read_metrics_csv;
use densify_core::data::{DepthMap, MetricsReport};
use densify_core::experiment::gradcheck::{run_gradcheck_suite, Scope};
use densify_core::experiment::{
    decode_checkpoint, encode_checkpoint, evaluate, load_checkpoint, named_stream, nearest_fill, run_eval,
    run_training, train, train_step, Dataset, ExperimentConfig, Split, CHECKPOINT_STEM,
};
use densify_core::hourglass::Network;
use densify_core::tensor::Adam;
use densify_core::{Error, Tensor};
use rand::Rng;

fn quick(seed: u64, steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy(seed, 2, steps);
    cfg.data.train_scenes = 4;
    cfg.data.eval_scenes = 2;
    cfg.optimizer.epochs = steps;
    cfg
}

#[test]
fn optimizer_defaults() {
    let cfg = ExperimentConfig::default();
    let o = &cfg.optimizer;
    assert_eq!((o.adam.beta1, o.adam.beta2, o.adam.weight_decay), (0.9, 0.999, 1e-6));
    assert_eq!(o.learning_rate, 1e-3);
    assert_eq!(o.batch_size, 2);
    assert_eq!(o.epochs, 15);
    let lrs: Vec<f64> = [0, 4, 5, 9, 10, 14].iter().map(|&e| o.learning_rate_at(e)).collect();
    assert_eq!(lrs, [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4]);
}

#[test]
fn config_json_round_trip_and_unknown_keys() {
    let cfg = quick(3, 10);
    let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let partial = ExperimentConfig::from_json(r#"{"seed": 9, "optimizer": {"batch_size": 4}}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.optimizer.batch_size, 4);
    assert_eq!(partial.optimizer.learning_rate, 1e-3);
    assert!(matches!(
        ExperimentConfig::from_json(r#"{"optimizer": {"lr": 0.1}}"#),
        Err(Error::Json(_))
    ));
    assert!(matches!(
        ExperimentConfig::from_json(r#"{"data": {"height": 24}}"#),
        Err(Error::Config(_))
    ));
}

#[test]
fn hash_tracks_every_field() {
    let a = quick(1, 10);
    let mut b = a.clone();
    b.optimizer.bn_momentum = 0.2;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
    assert_eq!(a.run_dir().file_name().unwrap().len(), 16);
}

#[test]
fn named_streams_are_independent_and_reproducible() {
    let draw = |seed, name| -> Vec<u64> {
        let mut r = named_stream(seed, name);
        (0..4).map(|_| r.gen()).collect()
    };
    assert_eq!(draw(5, "init"), draw(5, "init"));
    assert_ne!(draw(5, "init"), draw(5, "train.shuffle"));
    assert_ne!(draw(5, "init"), draw(6, "init"));
}

#[test]
fn splits_differ_and_regenerate_identically() {
    let cfg = quick(2, 1);
    let train_a = Dataset::generate(&cfg, Split::Train).unwrap();
    let train_b = Dataset::generate(&cfg, Split::Train).unwrap();
    let eval = Dataset::generate(&cfg, Split::Eval).unwrap();
    assert_eq!(train_a.len(), 4);
    assert_eq!(eval.len(), 2);
    for i in 0..train_a.len() {
        assert_eq!(train_a.scenes[i].depth, train_b.scenes[i].depth);
        assert_eq!(train_a.sparse[i], train_b.sparse[i]);
    }
    assert_ne!(train_a.scenes[0].depth, eval.scenes[0].depth);
    assert_eq!(train_a.sparse[0].valid_count(), 100);
}

#[test]
fn training_is_deterministic() {
    let cfg = quick(4, 6);
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.record.step_losses.len(), 6);
    assert_eq!(a.record.step_losses, b.record.step_losses);
    assert_eq!(a.store, b.store);
    assert_eq!(a.record.metrics, b.record.metrics);
}

#[test]
fn zero_epochs_leave_the_initialisation() {
    let mut cfg = quick(5, 1);
    cfg.optimizer.epochs = 0;
    let m = train(&cfg).unwrap();
    assert!(m.record.step_losses.is_empty());
    assert_eq!(m.record.initial_loss, m.record.final_loss);
    let init = Network::new(cfg.network.clone()).unwrap().init_store(&mut cfg.stream("init"));
    assert_eq!(m.store, init);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let cfg = quick(6, 1);
    let net = Network::new(cfg.network.clone()).unwrap();
    let mut store = net.init_store(&mut cfg.stream("init"));
    let name = "dep.head.w";
    let name = if store.get(name).is_ok() { name.to_string() } else { store.param_names()[0].clone() };
    let shape = store.get(&name).unwrap().shape();
    store.set(&name, Tensor::full(shape, f64::NAN)).unwrap();
    let data = Dataset::generate(&cfg, Split::Train).unwrap();
    let mut adam = Adam::new(cfg.optimizer.adam);
    let err = train_step(&net, &mut store, &mut adam, &data, &[0, 1], 1e-3, 0.1, 7).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 7 }), "{err}");
}

#[test]
fn two_hundred_steps_reduce_the_loss() {
    let mut cfg = ExperimentConfig::toy(7, 2, 200);
    cfg.data.eval_scenes = 0;
    let m = train(&cfg).unwrap();
    assert_eq!(m.record.steps, 200);
    assert!(m.record.final_loss < 0.5 * m.record.initial_loss, "{:?}", (m.record.initial_loss, m.record.final_loss));
    let first: f64 = m.record.step_losses[..10].iter().sum();
    let last: f64 = m.record.step_losses[190..].iter().sum();
    assert!(last < first);
    assert!(m.record.metrics.is_none());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = quick(8, 3);
    let m = train(&cfg).unwrap();
    let (bytes, manifest) = encode_checkpoint(&m.store, &cfg.hash());
    let buffered: usize = m.store.buffers().map(|(_, t)| t.numel()).sum();
    assert_eq!(bytes.len(), 8 * (m.store.num_scalars() + buffered));
    assert_eq!(manifest.config_hash, cfg.hash());
    let template = m.network.init_store(&mut cfg.stream("other"));
    assert_eq!(decode_checkpoint(&bytes, &manifest, &template).unwrap(), m.store);
}

#[test]
fn checkpoint_mismatch_names_the_first_tensor() {
    let small = quick(9, 1);
    let mut wide = small.clone();
    wide.network.hourglass.base_channels = 4;
    let store = Network::new(small.network.clone()).unwrap().init_store(&mut small.stream("init"));
    let template = Network::new(wide.network.clone()).unwrap().init_store(&mut wide.stream("init"));
    let (bytes, manifest) = encode_checkpoint(&store, &small.hash());
    let first_bad = manifest
        .tensors
        .iter()
        .find(|e| {
            let t = template.get(&e.name).or_else(|_| template.buffer(&e.name)).unwrap();
            t.shape().dims() != e.shape
        })
        .unwrap()
        .name
        .clone();
    let Err(Error::Load(msg)) = decode_checkpoint(&bytes, &manifest, &template) else {
        panic!("expected a load error")
    };
    assert!(msg.contains(&format!("`{first_bad}`")), "{msg}");

    let mut missing = manifest.clone();
    let dropped = missing.tensors.remove(3).name;
    let Err(Error::Load(msg)) = decode_checkpoint(&bytes, &missing, &store) else {
        panic!("expected a load error")
    };
    assert!(msg.contains(&format!("`{dropped}`")), "{msg}");

    let Err(Error::Load(msg)) = decode_checkpoint(&bytes[..bytes.len() - 8], &manifest, &store) else {
        panic!("expected a load error")
    };
    assert!(msg.contains(&format!("`{}`", manifest.tensors.last().unwrap().name)), "{msg}");
}

#[test]
fn run_writes_artifacts_and_eval_csv_mean_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(10, 4);
    cfg.output.root = dir.path().to_path_buf();
    let (run_dir, record) = run_training(&cfg).unwrap();
    assert!(run_dir.starts_with(dir.path()));
    for f in ["config.json", "run_record.json", "checkpoint.bin", "checkpoint.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert_eq!(ExperimentConfig::load(&run_dir.join("config.json")).unwrap(), cfg);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run_record.json")).unwrap()).unwrap();
    assert_eq!(saved["steps"], 4);
    assert_eq!(saved["config_hash"], record.config_hash.as_str());

    let (csv, report) = run_eval(&cfg, &run_dir.join(format!("{CHECKPOINT_STEM}.bin"))).unwrap();
    let rows = read_metrics_csv(&csv).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2].0, "mean");
    let per: Vec<MetricsReport> = rows[..2].iter().map(|r| r.1).collect();
    for (got, want) in [(rows[2].1.mae, (per[0].mae + per[1].mae) / 2.0), (rows[2].1.rel, (per[0].rel + per[1].rel) / 2.0)] {
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} {want}");
    }
    assert_eq!(Some(report.mean_refined().unwrap()), record.metrics);
}

#[test]
fn untrained_checkpoint_gives_finite_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(11, 1);
    cfg.output.root = dir.path().to_path_buf();
    cfg.optimizer.epochs = 0;
    let (run_dir, _) = run_training(&cfg).unwrap();
    let (_, report) = run_eval(&cfg, &run_dir.join("checkpoint.bin")).unwrap();
    for s in &report.scenes {
        assert!(s.refined.to_array().iter().all(|v| v.is_finite()), "{s:?}");
        assert!(s.coarse.to_array().iter().all(|v| v.is_finite()), "{s:?}");
    }
}

#[test]
fn eval_of_missing_checkpoint_is_an_io_error() {
    let cfg = quick(12, 1);
    let err = run_eval(&cfg, std::path::Path::new("/nonexistent/checkpoint.bin")).unwrap_err();
    assert!(matches!(err, Error::Io(_)), "{err}");
}

#[test]
fn loaded_checkpoint_reproduces_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(13, 3);
    cfg.output.root = dir.path().to_path_buf();
    let trained = train(&cfg).unwrap();
    densify_core::experiment::save_checkpoint(dir.path(), "ck", &trained.store, &cfg.hash()).unwrap();
    let (store, manifest) = load_checkpoint(&dir.path().join("ck.bin"), &trained.store).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash());
    let data = Dataset::generate(&cfg, Split::Eval).unwrap();
    assert_eq!(
        evaluate(&trained.network, &store, &data, 2).unwrap(),
        evaluate(&trained.network, &trained.store, &data, 2).unwrap()
    );
}

#[test]
fn nearest_fill_copies_the_closest_sample() {
    let mut values = vec![0.0; 12];
    let mut valid = vec![false; 12];
    values[0] = 2.0;
    valid[0] = true;
    values[11] = 5.0;
    valid[11] = true;
    let filled = nearest_fill(&DepthMap::new(3, 4, values, valid).unwrap()).unwrap();
    assert_eq!(filled.values(), &[2.0, 2.0, 2.0, 5.0, 2.0, 2.0, 5.0, 5.0, 2.0, 5.0, 5.0, 5.0]);
    assert!(matches!(nearest_fill(&DepthMap::empty(2, 2)), Err(Error::Evaluation(_))));
}

#[test]
fn gradcheck_scope_parsing() {
    assert_eq!("modules".parse::<Scope>().unwrap(), Scope::Modules);
    for bad in ["", "everything"] {
        let Err(Error::Usage(msg)) = bad.parse::<Scope>() else {
            panic!("expected a usage error")
        };
        assert!(msg.contains("primitives, modules, full"), "{msg}");
    }
}

#[test]
fn primitive_and_module_suites_pass() {
    for scope in [Scope::Primitives, Scope::Modules] {
        let results = run_gradcheck_suite(scope).unwrap();
        assert!(!results.is_empty());
        for r in results {
            assert!(r.report.passed && r.report.checked > 0, "{}: {:?}", r.name, r.report);
            assert!(r.report.max_rel_error <= 1e-5, "{}: {:?}", r.name, r.report);
        }
    }
}

#[test]
fn overfit_training_scenes_beat_the_sparse_baseline() {
    let mut cfg = quick(1, 600);
    cfg.data.eval_scenes = 0;
    let m = train(&cfg).unwrap();
    let report = evaluate(&m.network, &m.store, &Dataset::generate(&cfg, Split::Train).unwrap(), 2).unwrap();
    let (refined, baseline) = (report.mean_refined().unwrap().rmse, report.mean_baseline().unwrap().rmse);
    assert!(refined < baseline, "refined {refined} vs nearest fill {baseline}");
}
