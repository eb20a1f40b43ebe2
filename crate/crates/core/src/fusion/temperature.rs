//! Timestep-dependent attention temperature per modality expert.
//!
//! `α(t)` and `β(t)` come from a sinusoidal time embedding through a
//! per-expert linear layer and softplus, so both stay positive. With
//! `c = α·e^{−β}` the temperature is `τ(t) = t·c + (1−t)(1−c)`, evaluated as
//! `(1−t) + c·(2t−1)` so that `τ(0.5) = 0.5` holds exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softplus, ParamSet, Tape, Tensor, Var};

pub const TAU_MIN: f64 = 0.05;
pub const TAU_MAX: f64 = 20.0;

/// `[1 × dim]` embedding `(sin(ω_k t), cos(ω_k t))` with `ω_k = π·2^k / 2`.
pub fn time_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for k in 0..half {
        v.push((std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64 * t).sin());
    }
    for k in 0..half {
        v.push((std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64 * t).cos());
    }
    v.resize(dim, 0.0);
    Tensor::new(vec![1, dim], v).expect("positive dim")
}

/// The raw schedule before clamping.
pub fn schedule(alpha: f64, beta: f64, t: f64) -> f64 {
    let c = alpha * (-beta).exp();
    (1.0 - t) + c * (2.0 * t - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureEval {
    pub alpha: f64,
    pub beta: f64,
    pub pre_clamp: f64,
    pub tau: f64,
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} outside [0,1]")));
    }
    Ok(())
}

pub(crate) fn names(prefix: &str) -> (String, String) {
    (format!("{prefix}.temp_w"), format!("{prefix}.temp_b"))
}

/// Evaluates the schedule of the expert stored under `prefix`.
pub fn temperature(params: &ParamSet, prefix: &str, t: f64) -> Result<TemperatureEval> {
    check_t(t)?;
    let (wn, bn) = names(prefix);
    let w = params.get(&wn)?;
    let b = params.get(&bn)?;
    let raw = time_embedding(t, w.rows()).matmul(w)?;
    let alpha = softplus(raw.data()[0] + b.data()[0]);
    let beta = softplus(raw.data()[1] + b.data()[1]);
    let pre_clamp = schedule(alpha, beta, t);
    Ok(TemperatureEval {
        alpha,
        beta,
        pre_clamp,
        tau: pre_clamp.clamp(TAU_MIN, TAU_MAX),
    })
}

/// Records the schedule on `tape`; returns the clamped `τ` as a one-element
/// node together with the unclamped value.
pub(crate) fn temperature_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    t: f64,
) -> Result<(Var, f64)> {
    check_t(t)?;
    let (wn, bn) = names(prefix);
    let w = tape.param(&wn, params.get(&wn)?);
    let b = tape.param(&bn, params.get(&bn)?);
    let dim = tape.value(w).rows();
    let emb = tape.constant(time_embedding(t, dim));
    let raw = tape.matmul(emb, w)?;
    let raw = tape.add_row(raw, b)?;
    let ab = tape.softplus(raw);
    let alpha = tape.gather(ab, vec![0], &[1])?;
    let beta = tape.gather(ab, vec![1], &[1])?;
    let neg_beta = tape.scale(beta, -1.0);
    let decay = tape.exp(neg_beta);
    let c = tape.mul(alpha, decay)?;
    let slope = tape.scale(c, 2.0 * t - 1.0);
    let pre = tape.add_const(slope, 1.0 - t);
    let pre_value = tape.value(pre).item();
    Ok((tape.clamp(pre, TAU_MIN, TAU_MAX), pre_value))
}

/// Inserts schedule parameters initialized to `c = 0.5`, i.e. `τ ≡ 0.5`.
pub(crate) fn init(params: &mut ParamSet, prefix: &str, embed_dim: usize) {
    let (wn, bn) = names(prefix);
    params.insert(wn, Tensor::zeros(&[embed_dim, 2]));
    // softplus(ln(e−1)) = 1 and softplus(0) = ln 2, so c = 1·e^{−ln 2} = 0.5
    let b_alpha = (std::f64::consts::E - 1.0).ln();
    params.insert(bn, Tensor::new(vec![2], vec![b_alpha, 0.0]).unwrap());
}
