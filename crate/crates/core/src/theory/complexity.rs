//! Capacity proxies standing in for the Rademacher complexity of a model
//! class. Neither is the true quantity; both are labeled by kind.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::STATIC_LOGITS;
use crate::model::{Example, Routing, SrModel};
use crate::numerics::{Adam, AdamConfig, ParamSet, Rng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyKind {
    EmpiricalRademacher,
    WeightNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityProxy {
    pub kind: ProxyKind,
    /// Nonnegative proxy value.
    pub value: f64,
    /// Mean of the per-restart maxima before flooring at zero.
    pub raw_mean: f64,
    pub std_error: f64,
    pub restarts: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RademacherBudget {
    pub restarts: usize,
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for RademacherBudget {
    fn default() -> Self {
        RademacherBudget {
            restarts: 8,
            steps: 500,
            adam: AdamConfig::default(),
        }
    }
}

/// Returns `(1/N) Σ_j σ_j ℓ_j(θ)` and its gradient for signs `σ`.
pub type SignedObjective<'a> = dyn FnMut(&ParamSet, &[f64]) -> Result<(f64, BTreeMap<String, Tensor>)> + 'a;

/// Averages, over `restarts` Rademacher sign vectors `σ`, the largest value
/// of `(1/N) Σ_j σ_j ℓ_j(θ)` reached by Adam ascent from `start`.
pub fn empirical_rademacher(
    objective: &mut SignedObjective,
    start: &ParamSet,
    n: usize,
    budget: &RademacherBudget,
    seed: u64,
) -> Result<ComplexityProxy> {
    if budget.restarts == 0 || n == 0 {
        return Err(Error::Domain(format!(
            "need at least one restart and one sample, got K = {} and N = {n}",
            budget.restarts
        )));
    }
    let mut maxima = Vec::with_capacity(budget.restarts);
    for k in 0..budget.restarts {
        let mut rng = Rng::derive(seed, k as u64);
        let sigma: Vec<f64> = (0..n).map(|_| rng.sign()).collect();
        let mut params = start.clone();
        let mut opt = Adam::new(budget.adam);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..budget.steps {
            let (value, grads) = objective(&params, &sigma)?;
            best = best.max(value);
            let ascent = grads.into_iter().map(|(k, g)| (k, g.scale(-1.0))).collect();
            opt.step(&mut params, &ascent)?;
        }
        best = best.max(objective(&params, &sigma)?.0);
        maxima.push(best);
    }
    let k = maxima.len() as f64;
    let mean = maxima.iter().sum::<f64>() / k;
    let var = maxima.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    Ok(ComplexityProxy {
        kind: ProxyKind::EmpiricalRademacher,
        value: mean.max(0.0),
        raw_mean: mean,
        std_error: (var / k).sqrt(),
        restarts: budget.restarts,
        steps: budget.steps,
    })
}

/// Empirical Rademacher proxy of the class spanned by `model`'s parameters,
/// with per-sample losses `MSE(clamp(f(x)), y)`.
pub fn model_rademacher(
    model: &SrModel,
    start: &ParamSet,
    examples: &[Example],
    budget: &RademacherBudget,
    seed: u64,
) -> Result<ComplexityProxy> {
    let n = examples.len();
    let mut objective = |params: &ParamSet, sigma: &[f64]| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (ex, &s) in examples.iter().zip(sigma) {
            let mut tape = Tape::new();
            let (_, pred) = model.forward_tape(&mut tape, params, ex)?;
            let pred = tape.clamp(pred, 0.0, 1.0);
            let y = tape.constant(ex.hr.clone());
            let loss = tape.mse(pred, y)?;
            total += s * tape.value(loss).item() / n as f64;
            for (name, g) in tape.backward(loss)?.named() {
                let g = g.scale(s / n as f64);
                match grads.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&g)?,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        Ok((total, grads))
    };
    empirical_rademacher(&mut objective, start, n, budget, seed)
}

/// Starting point for the dynamic class that computes exactly the static
/// model: shared weights copied, router head zeroed with its bias set to the
/// static logits so every patch receives `w̄`.
pub fn moe_start_from_static(moe: &SrModel, static_params: &ParamSet, seed: u64) -> Result<ParamSet> {
    if moe.spec.routing != Routing::Dynamic {
        return Err(Error::Contract("target class must use dynamic routing".into()));
    }
    let mut params = moe.init(seed);
    let logits = static_params.get(STATIC_LOGITS)?.clone();
    for (name, t) in static_params.iter() {
        if name == STATIC_LOGITS {
            continue;
        }
        if let Ok(slot) = params.get_mut(name) {
            if slot.shape() != t.shape() {
                return Err(Error::dim("moe_start_from_static", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
    }
    let head = params.get("router.head_w")?.shape().to_vec();
    params.insert("router.head_w", Tensor::zeros(&head));
    params.insert("router.head_b", logits);
    Ok(params)
}

fn is_linear_layer(name: &str, t: &Tensor) -> bool {
    t.shape().len() == 2 && name != "embed.pos" && !name.ends_with("temp_w")
}

/// Product over linear layers of `min(‖A‖_F, √(‖A‖₁‖A‖_∞))`, each an upper
/// bound on the spectral norm.
pub fn weight_norm(params: &ParamSet) -> ComplexityProxy {
    let mut value = 1.0;
    let mut any = false;
    for (name, t) in params.iter() {
        if !is_linear_layer(name, t) {
            continue;
        }
        any = true;
        let (r, c) = (t.rows(), t.cols());
        let fro = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let col_max = (0..c)
            .map(|j| (0..r).map(|i| t.at(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let row_max = (0..r)
            .map(|i| t.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        value *= fro.min((col_max * row_max).sqrt());
    }
    if !any {
        value = 0.0;
    }
    ComplexityProxy {
        kind: ProxyKind::WeightNorm,
        value,
        raw_mean: value,
        std_error: 0.0,
        restarts: 0,
        steps: 0,
    }
}
