use m3esr::config::ExperimentConfig;
use m3esr::data::generate;
use m3esr::eval::{evaluate_checkpoint, routing_stats};
use m3esr::train::{restrict, save_run, train, RunCache, RunSpec, Variant, CHECKPOINT};
use m3esr::HarnessError;
use m3esr_core::theory::moe_start_from_static;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_train = 16;
    cfg.data.n_test = 6;
    cfg.train.steps = 6;
    cfg.train.batch = 4;
    cfg.seeds = vec![0];
    cfg
}

#[test]
fn evaluating_on_training_samples_is_refused() {
    let cfg = tiny();
    let data = generate(&cfg).unwrap();
    let r = train(&cfg, &data, &RunSpec::new(&cfg, Variant::Static, 0), "t").unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_run(dir.path(), &cfg, &data, &r).unwrap();
    let path = dir.path().join(CHECKPOINT);
    let e = evaluate_checkpoint(&path, &data.train, &data.train, "t").unwrap_err();
    assert!(matches!(e, HarnessError::Contamination(_)));
    assert_eq!(e.exit_code(), 3);
    let row = evaluate_checkpoint(&path, &data.train, &data.test, "t").unwrap();
    assert_eq!(row.heldout_mse, r.metrics.heldout_mse);
    assert_eq!(row.train_mse, r.metrics.train_mse);
}

/// With clean modalities and the router pinned at the static weights, the
/// dynamic model reproduces the static one.
#[test]
fn frozen_router_matches_static_fusion() {
    let mut cfg = tiny();
    cfg.data.corruption.clear();
    let data = generate(&cfg).unwrap();
    let s = train(&cfg, &data, &RunSpec::new(&cfg, Variant::Static, 2), "t").unwrap();
    let moe = RunSpec::new(&cfg, Variant::DynamicTemp, 2).model(&cfg).unwrap();
    let start = moe_start_from_static(&moe, &s.params, 2).unwrap();
    let mut worst: f64 = 0.0;
    for ex in &data.test.examples {
        let a = s.model.predict(&s.params, ex).unwrap();
        let b = moe.predict(&start, ex).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn static_fusion_has_no_routing_covariance() {
    let cfg = tiny();
    let data = generate(&cfg).unwrap();
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = RunCache::new(cache_dir.path());
    let s = cache.run(&cfg, &data, Variant::Static, &cfg.data.modalities, 0, "t").unwrap();
    assert_eq!(s.metrics.gamma, Some(0.0));
    let wbar = s.wbar().unwrap().unwrap();
    let ex = restrict(&data.test.examples, &s.run.modalities).unwrap();
    let stats = routing_stats(&s.model, &s.params, &ex, &wbar).unwrap();
    assert_eq!(stats.gamma, 0.0);
    assert!(stats.cov.data().iter().all(|&c| c == 0.0));
    assert_eq!(stats.first_order_prediction, 0.0);
}

/// Static fusion is a member of the MoE class, so its Rademacher proxy can
/// only exceed the MoE one by Monte-Carlo noise.
#[test]
fn static_proxy_does_not_exceed_moe_proxy() {
    let mut cfg = tiny();
    cfg.theory.rademacher_samples = 6;
    cfg.theory.rademacher.restarts = 3;
    cfg.theory.rademacher.steps = 4;
    cfg.theory.first_order_samples = 2;
    let data = generate(&cfg).unwrap();
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = RunCache::new(cache_dir.path());
    let mods = cfg.data.modalities.clone();
    let s = cache.run(&cfg, &data, Variant::Static, &mods, 0, "t").unwrap();
    let d = cache.run(&cfg, &data, Variant::DynamicTemp, &mods, 0, "t").unwrap();
    let r = m3esr::experiments::theory_report(&cfg, &data, &s, &d).unwrap();
    let (ps, pm) = (&r.proxy_static[0], &r.proxy_moe[0]);
    assert_eq!(ps.kind, pm.kind);
    let noise = 2.0 * ps.std_error.hypot(pm.std_error);
    assert!(ps.value <= pm.value + noise, "{ps:?} vs {pm:?}");
    assert_eq!(r.n_samples, data.test.len());
}
