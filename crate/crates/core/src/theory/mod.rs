//! Numerical checks of the dynamic-vs-static generalization argument.
//!
//! With `φ(z) = MSE(up + g(z), y)` and the static fused feature
//! `z_static = z_x + Σ_m w̄^m E_m`, the marginal contribution of expert `m`
//! at patch `i` is `Δ_i^m = −⟨∇φ(z_static)_i, E_m(·)_i⟩`. Routing moves the
//! feature by `Σ_m (w_i^m − w̄^m) E_m`, so to first order the loss changes by
//! `−Σ (w − w̄) Δ`, whose expectation splits into a bias term and
//! `Γ = Σ_{m,i} Cov(w_i^m, Δ_i^m)`.

mod complexity;

pub use complexity::{
    empirical_rademacher, model_rademacher, moe_start_from_static, weight_norm, ComplexityProxy,
    ProxyKind, RademacherBudget,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{StaticWeights, Weighting};
use crate::model::{Example, Mode, Routing, SrModel};
use crate::numerics::{ParamSet, Tape, Tensor};

/// Per-sample marginal contributions and the quantities they derive from.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalMatrix {
    /// `[M × N_p]`
    pub delta: Tensor,
    /// `∇_z φ(z_static)`, `[N_p × d_h]`
    pub grad: Tensor,
    pub z_static: Tensor,
    /// Expert outputs in modality order, each `[N_p × d_h]`.
    pub experts: Vec<Tensor>,
    /// Weights the model itself applies, `[M × N_p]`.
    pub weights: Tensor,
    pub phi_static: f64,
}

fn check_model(model: &SrModel) -> Result<()> {
    if model.spec.mode != Mode::Regression {
        return Err(Error::Mode("theory checks run on regression models only".into()));
    }
    if model.spec.routing == Routing::Off {
        return Err(Error::Contract("theory checks need modality experts".into()));
    }
    Ok(())
}

/// `φ` and its gradient at an arbitrary fused feature.
pub fn phi_with_grad(model: &SrModel, params: &ParamSet, ex: &Example, z: &Tensor) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let h = tape.constant(z.clone());
    let phi = model.phi_tape(&mut tape, params, ex, h)?;
    let g = tape.backward(phi)?;
    Ok((tape.value(phi).item(), g.wrt(h, z.shape())))
}

pub fn phi(model: &SrModel, params: &ParamSet, ex: &Example, z: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let h = tape.constant(z.clone());
    let phi = model.phi_tape(&mut tape, params, ex, h)?;
    Ok(tape.value(phi).item())
}

/// `Δ_i^m = −⟨grad_i, E_m,i⟩` for every modality and patch.
pub fn deltas_from(grad: &Tensor, experts: &[Tensor]) -> Result<Tensor> {
    let n = grad.rows();
    let mut out = Vec::with_capacity(experts.len() * n);
    for e in experts {
        if e.shape() != grad.shape() {
            return Err(Error::dim("marginal_contributions", grad.shape(), e.shape()));
        }
        for i in 0..n {
            out.push(-grad.row(i).iter().zip(e.row(i)).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Tensor::new(vec![experts.len(), n], out)
}

/// Marginal contributions of `model`'s experts at the static fused feature
/// built from the same experts with weights `wbar`.
pub fn marginal_contributions(
    model: &SrModel,
    params: &ParamSet,
    ex: &Example,
    wbar: &StaticWeights,
) -> Result<MarginalMatrix> {
    check_model(model)?;
    let layer = &model.spec.fusion;
    let t = model.spec.regression_t;
    let mut tape = Tape::new();
    let z = model.embed_tape(&mut tape, params, ex)?;
    let experts = layer.experts_tape(&mut tape, params, z, &ex.bundle, t)?;
    let wb = tape.constant(wbar.values.clone());
    let zs = layer.combine_tape(&mut tape, z, &experts, Weighting::Static(wb))?;
    let n = tape.value(z).rows();
    let m = experts.len();
    let weights = match model.spec.routing {
        Routing::Dynamic => {
            let w = layer.route_tape(&mut tape, params, z, &ex.router_features)?;
            tape.value(w).clone()
        }
        _ => {
            let w = layer.static_tape(&mut tape, params)?;
            let v = tape.value(w).data().to_vec();
            Tensor::from_fn(&[m, n], |k| v[k / n])
        }
    };
    let z_static = tape.value(zs).clone();
    let expert_values: Vec<Tensor> = experts.iter().map(|&e| tape.value(e).clone()).collect();
    let (phi_static, grad) = phi_with_grad(model, params, ex, &z_static)?;
    let delta = deltas_from(&grad, &expert_values)?;
    Ok(MarginalMatrix {
        delta,
        grad,
        z_static,
        experts: expert_values,
        weights,
        phi_static,
    })
}

/// Mean that is exact when every value is equal.
fn shifted_mean(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let mut it = values.clone();
    let first = it.next().unwrap_or(0.0);
    first + values.map(|v| v - first).sum::<f64>() / n as f64
}

fn check_batches(weights: &[Tensor], deltas: &[Tensor]) -> Result<usize> {
    let n = weights.len();
    if n < 2 || deltas.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: n.min(deltas.len()),
        });
    }
    if deltas.len() != n {
        return Err(Error::Contract(format!("{n} weight samples but {} delta samples", deltas.len())));
    }
    let shape = weights[0].shape();
    for (w, d) in weights.iter().zip(deltas) {
        if w.shape() != shape || d.shape() != shape {
            return Err(Error::dim("gamma_moe", w.shape(), d.shape()));
        }
    }
    Ok(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean_w: Tensor,
    pub mean_delta: Tensor,
    /// Population covariance per `(m, i)`.
    pub cov: Tensor,
}

/// Two-pass population moments across samples, accumulated in index order.
pub fn moments(weights: &[Tensor], deltas: &[Tensor]) -> Result<Moments> {
    let n = check_batches(weights, deltas)?;
    let shape = weights[0].shape().to_vec();
    let k = weights[0].numel();
    let mut mw = vec![0.0; k];
    let mut md = vec![0.0; k];
    let mut cov = vec![0.0; k];
    for j in 0..k {
        mw[j] = shifted_mean(weights.iter().map(|w| w.data()[j]), n);
        md[j] = shifted_mean(deltas.iter().map(|d| d.data()[j]), n);
        let mut acc = 0.0;
        for s in 0..n {
            acc += (weights[s].data()[j] - mw[j]) * (deltas[s].data()[j] - md[j]);
        }
        cov[j] = acc / n as f64;
    }
    Ok(Moments {
        mean_w: Tensor::new(shape.clone(), mw)?,
        mean_delta: Tensor::new(shape.clone(), md)?,
        cov: Tensor::new(shape, cov)?,
    })
}

/// `Γ = Σ_{m,i} Cov(w_i^m, Δ_i^m)` together with the covariance matrix.
pub fn gamma_moe(weights: &[Tensor], deltas: &[Tensor]) -> Result<(f64, Tensor)> {
    let cov = moments(weights, deltas)?.cov;
    Ok((cov.data().iter().sum(), cov))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    /// `max_{m,i} |E[(w−w̄)Δ] − ((E[w]−w̄)E[Δ] + Cov(w,Δ))|`
    pub max_residual: f64,
    /// `|mean_{samples,i} w_i^m − w̄^m|` per modality.
    pub unbiasedness_residual: Vec<f64>,
}

pub fn covariance_identity_check(weights: &[Tensor], deltas: &[Tensor], wbar: &StaticWeights) -> Result<IdentityCheck> {
    let mo = moments(weights, deltas)?;
    let n = weights.len();
    let (m, np) = (weights[0].rows(), weights[0].cols());
    if wbar.values.numel() != m {
        return Err(Error::Contract(format!(
            "{} static weights for {m} modalities",
            wbar.values.numel()
        )));
    }
    let wb = wbar.values.data();
    let mut worst: f64 = 0.0;
    for (k, &wk) in wb.iter().enumerate() {
        for i in 0..np {
            let j = k * np + i;
            let lhs = (0..n)
                .map(|s| (weights[s].data()[j] - wk) * deltas[s].data()[j])
                .sum::<f64>()
                / n as f64;
            let rhs = (mo.mean_w.data()[j] - wk) * mo.mean_delta.data()[j] + mo.cov.data()[j];
            worst = worst.max((lhs - rhs).abs());
        }
    }
    let unbiasedness_residual = (0..m)
        .map(|k| {
            let mean = mo.mean_w.data()[k * np..(k + 1) * np].iter().sum::<f64>() / np as f64;
            (mean - wb[k]).abs()
        })
        .collect();
    Ok(IdentityCheck {
        max_residual: worst,
        unbiasedness_residual,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderCheck {
    pub scales: Vec<f64>,
    /// `|φ(z + εD) − φ(z) − ε⟨∇φ, D⟩|` per scale.
    pub remainders: Vec<f64>,
    /// Least-squares slope of log remainder against log scale; `None` when
    /// some remainder is exactly zero.
    pub slope: Option<f64>,
}

fn validate_scales(scales: &[f64]) -> Result<()> {
    if scales.len() < 4 {
        return Err(Error::Domain(format!("need at least 4 scales, got {}", scales.len())));
    }
    if scales.iter().any(|&s| s.is_nan() || s <= 0.0) || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Domain(format!("scales {scales:?} must be positive and decreasing")));
    }
    Ok(())
}

pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if ys.iter().any(|&y| y.is_nan() || y <= 0.0) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Some(sxy / sxx)
}

/// Remainder of the first-order expansion of `phi` at `z` along `direction`,
/// given the directional derivative `⟨∇φ(z), direction⟩`.
pub fn remainder_scaling(
    mut phi: impl FnMut(&Tensor) -> Result<f64>,
    z: &Tensor,
    direction: &Tensor,
    directional_derivative: f64,
    scales: &[f64],
) -> Result<FirstOrderCheck> {
    validate_scales(scales)?;
    let base = phi(z)?;
    let remainders = scales
        .iter()
        .map(|&eps| {
            let moved = z.zip_map(direction, "first_order", |a, d| a + eps * d)?;
            Ok((phi(&moved)? - base - eps * directional_derivative).abs())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FirstOrderCheck {
        scales: scales.to_vec(),
        slope: log_log_slope(scales, &remainders),
        remainders,
    })
}

/// Routing displacement `Σ_m (w_i^m − w̄^m) E_m,i` of one sample.
pub fn routing_direction(mm: &MarginalMatrix, wbar: &StaticWeights) -> Result<Tensor> {
    let (m, n) = (mm.weights.rows(), mm.weights.cols());
    let d = mm.grad.cols();
    let mut out = vec![0.0; n * d];
    for k in 0..m {
        let wb = wbar.values.data()[k];
        let e = &mm.experts[k];
        for i in 0..n {
            let c = mm.weights.at(k, i) - wb;
            for j in 0..d {
                out[i * d + j] += c * e.at(i, j);
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

/// First-order check on one sample: `z = z_static + ε·Σ(w − w̄)E`.
pub fn first_order_check(
    model: &SrModel,
    params: &ParamSet,
    ex: &Example,
    wbar: &StaticWeights,
    scales: &[f64],
) -> Result<FirstOrderCheck> {
    validate_scales(scales)?;
    let mm = marginal_contributions(model, params, ex, wbar)?;
    let dir = routing_direction(&mm, wbar)?;
    let lin = mm.grad.dot(&dir)?;
    remainder_scaling(|z| phi(model, params, ex, z), &mm.z_static, &dir, lin, scales)
}

/// Averages remainders over samples, then fits the slope.
pub fn pooled_first_order(checks: &[FirstOrderCheck]) -> Result<FirstOrderCheck> {
    let first = checks.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let k = first.scales.len();
    let mut mean = vec![0.0; k];
    for c in checks {
        if c.scales != first.scales {
            return Err(Error::Contract("first-order checks use different scales".into()));
        }
        for (m, r) in mean.iter_mut().zip(&c.remainders) {
            *m += r / checks.len() as f64;
        }
    }
    Ok(FirstOrderCheck {
        scales: first.scales.clone(),
        slope: log_log_slope(&first.scales, &mean),
        remainders: mean,
    })
}

/// `√(ln(1/δ) / 2N)`.
pub fn confidence_term(n: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("confidence level δ = {delta} outside (0,1)")));
    }
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    Ok(((1.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub modalities: Vec<String>,
    pub gamma: f64,
    /// `cov[m][i]`
    pub cov: Vec<Vec<f64>>,
    /// Mean over patches of `cov[m][·]`.
    pub mean_cov: Vec<f64>,
    pub identity_residual: f64,
    pub unbiasedness_residual: Vec<f64>,
    pub first_order_slope: Option<f64>,
    pub first_order_scales: Vec<f64>,
    pub remainders: Vec<f64>,
    pub proxy_moe: Vec<ComplexityProxy>,
    pub proxy_static: Vec<ComplexityProxy>,
    pub lipschitz: f64,
    pub confidence_term: f64,
    pub n_samples: usize,
    pub delta: f64,
    /// Held-out risk of the static model.
    pub static_risk: f64,
    /// `static_risk − Γ + 2L(R_moe − R_static) + confidence`, with the
    /// empirical Rademacher proxies standing in for `R`.
    pub bound_rhs: f64,
    /// Held-out risk of the dynamic model, for comparison with the bound.
    pub moe_risk: f64,
    pub gap_static: f64,
    pub gap_moe: f64,
    /// Mean over samples of `φ(z_moe) − φ(z_static)`.
    pub loss_difference: f64,
    /// Mean over samples of `−Σ (w − w̄) Δ`.
    pub first_order_prediction: f64,
}

/// Measured pieces handed to [`bound_report`].
#[derive(Clone, Debug)]
pub struct BoundInputs {
    pub modalities: Vec<String>,
    pub gamma: f64,
    pub cov: Tensor,
    pub identity: IdentityCheck,
    pub first_order: FirstOrderCheck,
    pub proxy_moe: Vec<ComplexityProxy>,
    pub proxy_static: Vec<ComplexityProxy>,
    pub static_risk: f64,
    pub moe_risk: f64,
    pub gap_static: f64,
    pub gap_moe: f64,
    pub loss_difference: f64,
    pub first_order_prediction: f64,
    pub n_samples: usize,
    pub delta: f64,
}

fn rademacher_value(proxies: &[ComplexityProxy]) -> f64 {
    proxies
        .iter()
        .find(|p| p.kind == ProxyKind::EmpiricalRademacher)
        .map_or(0.0, |p| p.value)
}

pub fn bound_report(inp: BoundInputs) -> Result<TheoryReport> {
    let confidence = confidence_term(inp.n_samples, inp.delta)?;
    let lipschitz = 1.0;
    let delta_r = 2.0 * lipschitz * (rademacher_value(&inp.proxy_moe) - rademacher_value(&inp.proxy_static));
    let (m, np) = (inp.cov.rows(), inp.cov.cols());
    let cov: Vec<Vec<f64>> = (0..m).map(|k| inp.cov.row(k).to_vec()).collect();
    let mean_cov = cov.iter().map(|r| r.iter().sum::<f64>() / np as f64).collect();
    Ok(TheoryReport {
        modalities: inp.modalities,
        gamma: inp.gamma,
        cov,
        mean_cov,
        identity_residual: inp.identity.max_residual,
        unbiasedness_residual: inp.identity.unbiasedness_residual,
        first_order_slope: inp.first_order.slope,
        first_order_scales: inp.first_order.scales,
        remainders: inp.first_order.remainders,
        proxy_moe: inp.proxy_moe,
        proxy_static: inp.proxy_static,
        lipschitz,
        confidence_term: confidence,
        n_samples: inp.n_samples,
        delta: inp.delta,
        static_risk: inp.static_risk,
        bound_rhs: inp.static_risk - inp.gamma + delta_r + confidence,
        moe_risk: inp.moe_risk,
        gap_static: inp.gap_static,
        gap_moe: inp.gap_moe,
        loss_difference: inp.loss_difference,
        first_order_prediction: inp.first_order_prediction,
    })
}

#[cfg(test)]
mod tests;
