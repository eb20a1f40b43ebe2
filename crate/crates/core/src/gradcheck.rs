//! Reverse-mode gradients checked against central differences, per tape op
//! and for the full fused regression model on a small instance.

use crate::error::{Error, Result};
use crate::fusion::{FusionDims, FusionLayer, TemperatureMode};
use crate::model::{Example, Mode, ModelSpec, Routing, SrModel};
use crate::numerics::{finite_diff, max_relative_error, ParamSet, Rng, Tape, Tensor, Var};
use crate::synth::{extract_modalities, generate_sample, Modality, SynthConfig};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradient entries smaller than this are compared on an absolute scale: a
/// central difference at `STEP` carries about `1e-11` of rounding noise, so a
/// relative comparison of tinier entries would measure the oracle.
pub const FLOOR: f64 = 1e-4;
/// The same for the composed model, whose tolerance is looser.
pub const MODEL_FLOOR: f64 = 1e-5;

pub const OPS: [&str; 25] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_row",
    "mul_col",
    "scale",
    "add_const",
    "mul_scalar",
    "div_scalar",
    "sigmoid",
    "gelu",
    "softplus",
    "exp",
    "clamp",
    "softmax_rows",
    "layer_norm_rows",
    "mse",
    "sum",
    "concat_cols",
    "gather",
    "reshape",
    "depthwise_conv3x3",
];

const CLAMP: (f64, f64) = (-0.5, 0.5);

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.range(-1.0, 1.0))
}

/// Inputs kept at least `0.01` away from the clamp corners.
fn away_from_kinks(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.range(-1.0, 1.0);
        if (v - CLAMP.0).abs() > 0.01 && (v - CLAMP.1).abs() > 0.01 {
            break v;
        }
    })
}

fn row_std(row: &[f64]) -> f64 {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64).sqrt()
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    params: ParamSet,
    build: Build,
}

fn case(op: &str, rng: &mut Rng) -> Result<Case> {
    let n = 1 + rng.below(4);
    let k = 1 + rng.below(4);
    let p = 1 + rng.below(4);
    let mut params = ParamSet::new();
    let mut put = |name: &str, t: Tensor| params.insert(name, t);
    let build: Build = match op {
        "matmul" => {
            put("a", uniform(rng, &[n, k]));
            put("b", uniform(rng, &[k, p]));
            Box::new(|t, v| t.matmul(v[0], v[1]))
        }
        "transpose" => {
            put("a", uniform(rng, &[n, k]));
            Box::new(|t, v| t.transpose(v[0]))
        }
        "add" | "sub" | "mul" | "mse" => {
            put("a", uniform(rng, &[n, k]));
            put("b", uniform(rng, &[n, k]));
            match op {
                "add" => Box::new(|t, v| t.add(v[0], v[1])),
                "sub" => Box::new(|t, v| t.sub(v[0], v[1])),
                "mul" => Box::new(|t, v| t.mul(v[0], v[1])),
                _ => Box::new(|t, v| t.mse(v[0], v[1])),
            }
        }
        "add_row" | "mul_row" => {
            put("a", uniform(rng, &[n, k]));
            put("b", uniform(rng, &[k]));
            if op == "add_row" {
                Box::new(|t, v| t.add_row(v[0], v[1]))
            } else {
                Box::new(|t, v| t.mul_row(v[0], v[1]))
            }
        }
        "mul_col" => {
            put("a", uniform(rng, &[n, k]));
            put("b", uniform(rng, &[n]));
            Box::new(|t, v| t.mul_col(v[0], v[1]))
        }
        "scale" | "add_const" => {
            put("a", uniform(rng, &[n, k]));
            let c = rng.range(-2.0, 2.0);
            if op == "scale" {
                Box::new(move |t, v| Ok(t.scale(v[0], c)))
            } else {
                Box::new(move |t, v| Ok(t.add_const(v[0], c)))
            }
        }
        "mul_scalar" | "div_scalar" => {
            put("a", uniform(rng, &[n, k]));
            let s = rng.range(0.5, 1.0) * rng.sign();
            put("b", Tensor::scalar(s));
            if op == "mul_scalar" {
                Box::new(|t, v| t.mul_scalar(v[0], v[1]))
            } else {
                Box::new(|t, v| t.div_scalar(v[0], v[1]))
            }
        }
        "sigmoid" | "gelu" | "softplus" | "exp" => {
            put("a", uniform(rng, &[n, k]));
            match op {
                "sigmoid" => Box::new(|t, v| Ok(t.sigmoid(v[0]))),
                "gelu" => Box::new(|t, v| Ok(t.gelu(v[0]))),
                "softplus" => Box::new(|t, v| Ok(t.softplus(v[0]))),
                _ => Box::new(|t, v| Ok(t.exp(v[0]))),
            }
        }
        "clamp" => {
            put("a", away_from_kinks(rng, &[n, k]));
            Box::new(|t, v| Ok(t.clamp(v[0], CLAMP.0, CLAMP.1)))
        }
        "softmax_rows" => {
            put("a", uniform(rng, &[n, k]));
            let tau = rng.range(0.2, 3.0);
            Box::new(move |t, v| t.softmax_rows(v[0], tau))
        }
        "layer_norm_rows" => {
            // nearly constant rows make the difference quotient, not the
            // gradient, inaccurate
            let a = loop {
                let a = uniform(rng, &[n, k + 1]);
                if (0..n).all(|i| row_std(a.row(i)) > 0.1) {
                    break a;
                }
            };
            put("a", a);
            Box::new(|t, v| t.layer_norm_rows(v[0], 1e-5))
        }
        "sum" => {
            put("a", uniform(rng, &[n, k]));
            Box::new(|t, v| Ok(t.sum(v[0])))
        }
        "concat_cols" => {
            put("a", uniform(rng, &[n, k]));
            put("b", uniform(rng, &[n, p]));
            Box::new(|t, v| t.concat_cols(v[0], v[1]))
        }
        "gather" => {
            put("a", uniform(rng, &[n, k]));
            let len = 1 + rng.below(2 * n * k);
            let index: Vec<usize> = (0..len).map(|_| rng.below(n * k)).collect();
            Box::new(move |t, v| t.gather(v[0], index.clone(), &[len]))
        }
        "reshape" => {
            put("a", uniform(rng, &[n, k]));
            Box::new(move |t, v| t.reshape(v[0], &[k, n]))
        }
        "depthwise_conv3x3" => {
            let c = 1 + rng.below(2);
            put("a", uniform(rng, &[n + 1, k + 1, c]));
            put("b", uniform(rng, &[c, 9]));
            Box::new(|t, v| t.depthwise_conv3x3(v[0], v[1]))
        }
        other => {
            return Err(Error::Lookup {
                kind: "op",
                name: other.to_string(),
            })
        }
    };
    Ok(Case { params, build })
}

/// Builds `Σ out ⊙ R` for a fixed random `R`, so every output entry carries
/// a distinct weight.
fn probe(c: &Case, tape: &mut Tape, ps: &ParamSet, weights: &mut Option<Tensor>, seed: u64) -> Result<Var> {
    let vars: Vec<Var> = ps.iter().map(|(name, t)| tape.param(name, t)).collect();
    let out = (c.build)(tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let r = weights.get_or_insert_with(|| {
        let mut rng = Rng::derive(seed, 99);
        Tensor::from_fn(&shape, |_| rng.range(-1.0, 1.0))
    });
    let r = tape.constant(r.clone());
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Largest relative error between autodiff and central differences for one
/// random instance of `op`.
pub fn check_op(op: &str, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let c = case(op, &mut rng)?;
    let mut weights = None;
    let mut tape = Tape::new();
    let root = probe(&c, &mut tape, &c.params, &mut weights, seed)?;
    let analytic = tape.backward(root)?.named();
    let numeric = finite_diff(
        |ps| {
            let mut tape = Tape::new();
            let root = probe(&c, &mut tape, ps, &mut weights.clone(), seed)?;
            Ok(tape.value(root).item())
        },
        &c.params,
        STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric, FLOOR))
}

/// The two-modality regression model on an 8×8 image used by the
/// composition check.
pub fn toy_model(routing: Routing) -> Result<SrModel> {
    SrModel::new(ModelSpec {
        hr_size: 8,
        channels: 1,
        scale: 2,
        patch: 4,
        fusion: FusionLayer::new(
            FusionDims {
                token_dim: 8,
                latent_dim: 6,
                attn_dim: 3,
                router_dim: 4,
                router_blocks: 1,
                time_dim: 4,
                buckets: 2,
            },
            vec![Modality::Seg, Modality::Edge],
            TemperatureMode::Scheduled,
        ),
        routing,
        mode: Mode::Regression,
        regression_t: 0.7,
        refine_steps: 1,
    })
}

pub fn toy_example(model: &SrModel, seed: u64) -> Result<Example> {
    let spec = &model.spec;
    let cfg = SynthConfig {
        hr_size: spec.hr_size,
        scale: spec.scale,
        patch: spec.patch,
        token_dim: spec.fusion.dims.token_dim,
        ..SynthConfig::default()
    };
    let s = generate_sample(&cfg, seed)?;
    let bundle = extract_modalities(&s, &cfg.projector(), &spec.fusion.modalities, cfg.patch)?;
    Example::new(spec, s.lr, s.hr, bundle)
}

/// Relative error of `∂ MSE(decode(fuse(·)), y) / ∂θ` over every parameter of
/// the toy model, with parameters perturbed away from their initial values.
pub fn check_toy_model(routing: Routing, seed: u64) -> Result<f64> {
    let model = toy_model(routing)?;
    let ex = toy_example(&model, seed)?;
    let mut params = model.init(seed);
    let mut rng = Rng::derive(seed, 7);
    for (_, t) in params.iter_mut() {
        *t = t.map(|v| v + 0.2 * rng.normal());
    }
    let loss = |ps: &ParamSet| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let (_, pred) = model.forward_tape(&mut tape, ps, &ex)?;
        let y = tape.constant(ex.hr.clone());
        let l = tape.mse(pred, y)?;
        Ok((tape, l))
    };
    let (tape, l) = loss(&params)?;
    let analytic = tape.backward(l)?.named();
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} of {} parameters received a gradient",
            analytic.len(),
            params.len()
        )));
    }
    let numeric = finite_diff(
        |ps| {
            let (tape, l) = loss(ps)?;
            Ok(tape.value(l).item())
        },
        &params,
        STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric, MODEL_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_is_covered_and_passes() {
        for op in OPS {
            for seed in 0..5 {
                let e = check_op(op, seed).unwrap();
                assert!(e < 1e-6, "{op} seed {seed}: {e}");
            }
        }
        assert!(check_op("conv5x5", 0).is_err());
    }

    #[test]
    fn toy_model_passes() {
        for routing in [Routing::Dynamic, Routing::Static] {
            let e = check_toy_model(routing, 1).unwrap();
            assert!(e < 1e-5, "{routing:?}: {e}");
        }
    }
}
