use std::collections::BTreeMap;

use super::*;
use crate::fusion::{FusionDims, FusionLayer, TemperatureMode};
use crate::model::ModelSpec;
use crate::numerics::Rng;
use crate::synth::{extract_modalities, generate_sample, Modality, SynthConfig};

fn spec(routing: Routing, hr: usize, scale: usize) -> ModelSpec {
    let small = hr < 32;
    ModelSpec {
        hr_size: hr,
        channels: 1,
        scale,
        patch: 4,
        fusion: FusionLayer::new(
            if small {
                FusionDims {
                    token_dim: 8,
                    latent_dim: 6,
                    attn_dim: 3,
                    router_dim: 4,
                    router_blocks: 1,
                    time_dim: 4,
                    buckets: 2,
                }
            } else {
                FusionDims::default()
            },
            vec![Modality::Seg, Modality::Depth, Modality::Edge],
            TemperatureMode::Scheduled,
        ),
        routing,
        mode: crate::model::Mode::Regression,
        regression_t: 1.0,
        refine_steps: 10,
    }
}

fn example(spec: &ModelSpec, seed: u64) -> Example {
    let cfg = SynthConfig {
        hr_size: spec.hr_size,
        scale: spec.scale,
        patch: spec.patch,
        token_dim: spec.fusion.dims.token_dim,
        ..SynthConfig::default()
    };
    let s = generate_sample(&cfg, seed).unwrap();
    let b = extract_modalities(&s, &cfg.projector(), &spec.fusion.modalities, cfg.patch).unwrap();
    Example::new(spec, s.lr, s.hr, b).unwrap()
}

fn wbar(v: &[f64]) -> StaticWeights {
    StaticWeights {
        values: Tensor::new(vec![v.len()], v.to_vec()).unwrap(),
    }
}

fn tiny() -> (SrModel, ParamSet, Example) {
    let model = SrModel::new(spec(Routing::Dynamic, 8, 2)).unwrap();
    let mut params = model.init(3);
    // larger decoder output so the loss surface has visible curvature
    params.insert("decoder.w2", params.get("decoder.w2").unwrap().scale(10.0));
    let ex = example(&model.spec, 11);
    (model, params, ex)
}

#[test]
fn zero_values_zero_their_row() {
    let (model, mut params, ex) = tiny();
    params.insert("expert.depth.w_v", Tensor::zeros(&[6, 6]));
    let mm = marginal_contributions(&model, &params, &ex, &wbar(&[0.4, 0.5, 0.6])).unwrap();
    assert!(mm.delta.row(1).iter().all(|&d| d == 0.0));
    assert!(mm.delta.row(0).iter().any(|&d| d != 0.0));
}

#[test]
fn stationary_point_gives_zero_deltas() {
    let (model, params, mut ex) = tiny();
    let w = wbar(&[0.4, 0.5, 0.6]);
    let zs = marginal_contributions(&model, &params, &ex, &w).unwrap().z_static;
    let mut tape = Tape::new();
    let h = tape.constant(zs);
    let pred = model.head_tape(&mut tape, &params, &ex, h).unwrap();
    ex.hr = tape.value(pred).clone();
    let mm = marginal_contributions(&model, &params, &ex, &w).unwrap();
    assert_eq!(mm.phi_static, 0.0);
    assert!(mm.delta.data().iter().all(|&d| d == 0.0));
}

#[test]
fn deltas_match_directional_differences() {
    let (model, params, ex) = tiny();
    let mm = marginal_contributions(&model, &params, &ex, &wbar(&[0.3, 0.7, 0.5])).unwrap();
    let eps = 1e-5;
    let base = phi(&model, &params, &ex, &mm.z_static).unwrap();
    for m in 0..3 {
        for i in 0..mm.delta.cols() {
            let mut z = mm.z_static.clone();
            let d = z.cols();
            for j in 0..d {
                z.data_mut()[i * d + j] += eps * mm.experts[m].at(i, j);
            }
            let fd = -(phi(&model, &params, &ex, &z).unwrap() - base) / eps;
            let a = mm.delta.at(m, i);
            assert!((a - fd).abs() <= 1e-3 * a.abs().max(1e-9), "m={m} i={i}: {a} vs {fd}");
        }
    }
}

#[test]
fn negated_experts_negate_deltas() {
    let mut rng = Rng::new(2);
    let g = Tensor::from_fn(&[4, 3], |_| rng.normal());
    let e = vec![Tensor::from_fn(&[4, 3], |_| rng.normal())];
    let neg = vec![e[0].scale(-1.0)];
    assert_eq!(deltas_from(&g, &neg).unwrap(), deltas_from(&g, &e).unwrap().scale(-1.0));
}

fn random_batches(rng: &mut Rng, n: usize, m: usize, np: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let w = (0..n).map(|_| Tensor::from_fn(&[m, np], |_| rng.uniform())).collect();
    let d = (0..n).map(|_| Tensor::from_fn(&[m, np], |_| rng.normal() * 1e-2)).collect();
    (w, d)
}

#[test]
fn constant_weights_have_zero_gamma() {
    let mut rng = Rng::new(4);
    let (_, d) = random_batches(&mut rng, 7, 2, 5);
    let c = Tensor::from_fn(&[2, 5], |i| 0.1 + 0.07 * i as f64);
    let w = vec![c; 7];
    let (g, cov) = gamma_moe(&w, &d).unwrap();
    assert_eq!(g, 0.0);
    assert!(cov.data().iter().all(|&v| v == 0.0));
}

#[test]
fn self_covariance_is_variance() {
    let mut rng = Rng::new(5);
    let (_, d) = random_batches(&mut rng, 6, 2, 3);
    let (g, _) = gamma_moe(&d, &d).unwrap();
    let mut brute = 0.0;
    for j in 0..6 {
        let mean = d.iter().map(|t| t.data()[j]).sum::<f64>() / 6.0;
        brute += d.iter().map(|t| (t.data()[j] - mean).powi(2)).sum::<f64>() / 6.0;
    }
    assert!(g >= 0.0);
    assert!((g - brute).abs() < 1e-15);
}

#[test]
fn hand_covariance() {
    let ws = [0.1, 0.4, 0.35, 0.8, 0.6];
    let ds = [-0.2, 0.1, 0.05, 0.3, 0.4];
    let w: Vec<Tensor> = ws.iter().map(|&v| Tensor::new(vec![1, 1], vec![v]).unwrap()).collect();
    let d: Vec<Tensor> = ds.iter().map(|&v| Tensor::new(vec![1, 1], vec![v]).unwrap()).collect();
    // means 0.45 and 0.13; Σ(w−w̄)(Δ−Δ̄) = 0.225
    let (g, _) = gamma_moe(&w, &d).unwrap();
    assert!((g - 0.225 / 5.0).abs() < 1e-15, "{g}");
}

#[test]
fn one_sample_is_insufficient() {
    let t = vec![Tensor::zeros(&[1, 1])];
    assert!(matches!(gamma_moe(&t, &t), Err(Error::InsufficientData { .. })));
}

#[test]
fn identity_holds_on_random_data() {
    let mut rng = Rng::new(6);
    for _ in 0..50 {
        let (w, d) = random_batches(&mut rng, 9, 3, 4);
        let wb = wbar(&[rng.uniform(), rng.uniform(), rng.uniform()]);
        let chk = covariance_identity_check(&w, &d, &wb).unwrap();
        assert!(chk.max_residual < 1e-10);
        assert_eq!(chk.unbiasedness_residual.len(), 3);
    }
}

#[test]
fn unbiased_weights_reduce_lhs_to_covariance() {
    // w takes values symmetric about w̄, so E[w] = w̄ exactly in binary
    let w: Vec<Tensor> = [0.25, 0.75, 0.5, 0.5]
        .iter()
        .map(|&v| Tensor::new(vec![1, 1], vec![v]).unwrap())
        .collect();
    let d: Vec<Tensor> = [0.3, -0.1, 0.2, 0.7]
        .iter()
        .map(|&v| Tensor::new(vec![1, 1], vec![v]).unwrap())
        .collect();
    let chk = covariance_identity_check(&w, &d, &wbar(&[0.5])).unwrap();
    assert_eq!(chk.unbiasedness_residual, vec![0.0]);
    let lhs = (0..4).map(|s| (w[s].item() - 0.5) * d[s].item()).sum::<f64>() / 4.0;
    let (g, _) = gamma_moe(&w, &d).unwrap();
    assert!((lhs - g).abs() < 1e-16);
}

const SCALES: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];

#[test]
fn linear_objective_has_no_remainder() {
    let mut rng = Rng::new(7);
    let a = Tensor::from_fn(&[4, 3], |_| rng.normal());
    let z = Tensor::from_fn(&[4, 3], |_| rng.normal());
    let dir = Tensor::from_fn(&[4, 3], |_| rng.normal());
    let lin = a.dot(&dir).unwrap();
    let chk = remainder_scaling(|z| a.dot(z), &z, &dir, lin, &SCALES).unwrap();
    assert!(chk.remainders.iter().all(|&r| r < 1e-14), "{:?}", chk.remainders);
}

#[test]
fn no_routing_displacement_is_degenerate() {
    let (_, _, ex) = tiny();
    // a static model applies w̄ itself, so w ≡ w̄
    let smodel = SrModel::new(spec(Routing::Static, 8, 2)).unwrap();
    let sparams = smodel.init(3);
    let wb = smodel.spec.fusion.static_weights(&sparams).unwrap();
    let chk = first_order_check(&smodel, &sparams, &ex, &wb, &SCALES).unwrap();
    assert!(chk.remainders.iter().all(|&r| r == 0.0));
    assert_eq!(chk.slope, None);
}

#[test]
fn default_model_remainder_is_quadratic() {
    let model = SrModel::new(spec(Routing::Dynamic, 32, 4)).unwrap();
    let mut params = model.init(1);
    params.insert("router.head_w", params.get("router.head_w").unwrap().scale(20.0));
    let ex = example(&model.spec, 5);
    let chk = first_order_check(&model, &params, &ex, &wbar(&[0.5, 0.5, 0.5]), &SCALES).unwrap();
    let slope = chk.slope.unwrap();
    assert!((1.7..=2.3).contains(&slope), "slope {slope}, {:?}", chk.remainders);
}

#[test]
fn scales_are_validated() {
    let (model, params, ex) = tiny();
    let w = wbar(&[0.5; 3]);
    assert!(first_order_check(&model, &params, &ex, &w, &[1e-1, 1e-2, 1e-3]).is_err());
    assert!(first_order_check(&model, &params, &ex, &w, &[1e-3, 1e-2, 1e-1, 1.0]).is_err());
}

#[test]
fn refinement_models_are_rejected() {
    let mut s = spec(Routing::Dynamic, 8, 2);
    s.mode = crate::model::Mode::Refinement;
    let model = SrModel::new(s).unwrap();
    let params = model.init(0);
    let ex = example(&model.spec, 1);
    let r = marginal_contributions(&model, &params, &ex, &wbar(&[0.5; 3]));
    assert!(matches!(r, Err(Error::Mode(_))));
}

#[test]
fn confidence_term_contract() {
    assert!(matches!(confidence_term(100, 1.0), Err(Error::Domain(_))));
    assert!(confidence_term(100, 0.0).is_err());
    let a = confidence_term(100, 0.05).unwrap();
    let b = confidence_term(400, 0.05).unwrap();
    assert!((a / b - 2.0).abs() < 1e-12);
}

#[test]
fn constant_class_has_negligible_rademacher_proxy() {
    let n = 50;
    let budget = RademacherBudget {
        restarts: 16,
        steps: 3,
        ..RademacherBudget::default()
    };
    let mut obj = |_: &ParamSet, s: &[f64]| Ok((0.7 * s.iter().sum::<f64>() / s.len() as f64, BTreeMap::new()));
    let p = empirical_rademacher(&mut obj, &ParamSet::new(), n, &budget, 3).unwrap();
    assert!(p.value >= 0.0);
    assert!(p.raw_mean.abs() <= 2.0 / ((16 * n) as f64).sqrt());
}

#[test]
fn rademacher_ascent_finds_sign_alignment() {
    // ℓ_j(θ) = θ_j² can match any sign pattern, so the supremum grows
    let n = 6;
    let mut start = ParamSet::new();
    start.insert("theta", Tensor::full(&[n], 0.5));
    let mut obj = |p: &ParamSet, s: &[f64]| {
        let th = p.get("theta")?.data();
        let v = th.iter().zip(s).map(|(t, s)| s * t * t).sum::<f64>() / n as f64;
        let g = Tensor::new(vec![n], th.iter().zip(s).map(|(t, s)| 2.0 * s * t / n as f64).collect())?;
        Ok((v, BTreeMap::from([("theta".to_string(), g)])))
    };
    let budget = RademacherBudget {
        restarts: 4,
        steps: 200,
        adam: crate::numerics::AdamConfig {
            lr: 1e-2,
            ..Default::default()
        },
    };
    let p = empirical_rademacher(&mut obj, &start, n, &budget, 1).unwrap();
    assert!(p.value > 0.25 * 0.5, "{p:?}");
}

#[test]
fn zero_weights_have_zero_norm_proxy() {
    let model = SrModel::new(spec(Routing::Dynamic, 8, 2)).unwrap();
    let mut params = model.init(0);
    for (_, t) in params.iter_mut() {
        *t = Tensor::zeros(t.shape());
    }
    assert_eq!(weight_norm(&params).value, 0.0);
    assert!(weight_norm(&model.init(0)).value > 0.0);
}

#[test]
fn moe_start_reproduces_static_model() {
    let smodel = SrModel::new(spec(Routing::Static, 8, 2)).unwrap();
    let mut sparams = smodel.init(4);
    sparams.insert(crate::fusion::STATIC_LOGITS, Tensor::new(vec![3], vec![-0.4, 1.1, 0.2]).unwrap());
    let dmodel = SrModel::new(spec(Routing::Dynamic, 8, 2)).unwrap();
    let dparams = moe_start_from_static(&dmodel, &sparams, 9).unwrap();
    let ex = example(&smodel.spec, 3);
    assert_eq!(
        smodel.predict(&sparams, &ex).unwrap(),
        dmodel.predict(&dparams, &ex).unwrap()
    );
}

#[test]
fn report_assembles_bound() {
    let proxy = |v: f64| ComplexityProxy {
        kind: ProxyKind::EmpiricalRademacher,
        value: v,
        raw_mean: v,
        std_error: 0.0,
        restarts: 1,
        steps: 1,
    };
    let r = bound_report(BoundInputs {
        modalities: vec!["seg".into()],
        gamma: 0.01,
        cov: Tensor::new(vec![1, 2], vec![0.004, 0.006]).unwrap(),
        identity: IdentityCheck {
            max_residual: 0.0,
            unbiasedness_residual: vec![0.0],
        },
        first_order: FirstOrderCheck {
            scales: vec![],
            remainders: vec![],
            slope: Some(2.0),
        },
        proxy_moe: vec![proxy(0.03)],
        proxy_static: vec![proxy(0.02)],
        static_risk: 0.1,
        moe_risk: 0.09,
        gap_static: 0.0,
        gap_moe: 0.0,
        loss_difference: 0.0,
        first_order_prediction: 0.0,
        n_samples: 200,
        delta: 0.05,
    })
    .unwrap();
    let conf = ((20.0f64).ln() / 400.0).sqrt();
    assert!((r.bound_rhs - (0.1 - 0.01 + 0.02 + conf)).abs() < 1e-15);
    assert!((r.gamma - r.cov.iter().flatten().sum::<f64>()).abs() < 1e-10);
    assert_eq!(r.mean_cov, vec![0.005]);
    let json = serde_json::to_value(&r).unwrap();
    for key in [
        "gamma",
        "cov",
        "unbiasedness_residual",
        "first_order_slope",
        "proxy_moe",
        "proxy_static",
        "confidence_term",
        "n_samples",
        "delta",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }
}
