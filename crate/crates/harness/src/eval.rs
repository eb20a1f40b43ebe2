//! Held-out evaluation of trained models.

use std::path::Path;

use m3esr_core::fusion::StaticWeights;
use m3esr_core::model::{Example, Mode, Routing, SrModel};
use m3esr_core::numerics::{derive_seed, ParamSet, Tensor};
use m3esr_core::synth::Modality;
use m3esr_core::theory::{covariance_identity_check, gamma_moe, marginal_contributions, IdentityCheck};
use rayon::prelude::*;

use crate::data::{check_disjoint, Split};
use crate::error::Result;
use crate::metrics::{mse, psnr_from_mse, ssim, MetricsRow};
use crate::train::{load_checkpoint, restrict, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct SplitEval {
    pub mse: f64,
    /// From the mean MSE, so it always agrees with `mse`.
    pub psnr: f64,
    pub ssim: f64,
    pub gamma: Option<f64>,
}

/// Covariance statistics of a model's routing over a set of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    pub gamma: f64,
    /// `[M × N_p]`
    pub cov: Tensor,
    pub identity: IdentityCheck,
    /// Mean over samples of `φ(z_model) − φ(z_static)`.
    pub loss_difference: f64,
    /// Mean over samples of `−Σ (w − w̄) Δ`.
    pub first_order_prediction: f64,
}

impl RoutingStats {
    /// Mean over patches of each modality's covariance.
    pub fn mean_cov(&self) -> Vec<f64> {
        let np = self.cov.cols();
        (0..self.cov.rows()).map(|k| self.cov.row(k).iter().sum::<f64>() / np as f64).collect()
    }
}

pub fn routing_stats(model: &SrModel, params: &ParamSet, examples: &[Example], wbar: &StaticWeights) -> Result<RoutingStats> {
    let per: Vec<(Tensor, Tensor, f64, f64)> = examples
        .par_iter()
        .map(|ex| {
            let mm = marginal_contributions(model, params, ex, wbar)?;
            let mut tape = m3esr_core::numerics::Tape::new();
            let (_, pred) = model.forward_tape(&mut tape, params, ex)?;
            let phi_model = m3esr_core::model::loss(tape.value(pred), &ex.hr)?;
            let np = mm.weights.cols();
            let pred1 = -(0..mm.weights.numel())
                .map(|j| (mm.weights.data()[j] - wbar.values.data()[j / np]) * mm.delta.data()[j])
                .sum::<f64>();
            Ok((mm.weights, mm.delta, phi_model - mm.phi_static, pred1))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let weights: Vec<Tensor> = per.iter().map(|p| p.0.clone()).collect();
    let deltas: Vec<Tensor> = per.iter().map(|p| p.1.clone()).collect();
    let (gamma, cov) = gamma_moe(&weights, &deltas)?;
    let identity = covariance_identity_check(&weights, &deltas, wbar)?;
    Ok(RoutingStats {
        gamma,
        cov,
        identity,
        loss_difference: per.iter().map(|p| p.2).sum::<f64>() / n,
        first_order_prediction: per.iter().map(|p| p.3).sum::<f64>() / n,
    })
}

/// Mean metrics over `split` in index order. `gamma` is measured when
/// `wbar` is given and the model routes through experts.
pub fn evaluate_split(
    model: &SrModel,
    params: &ParamSet,
    split: &Split,
    modalities: &[Modality],
    wbar: Option<&StaticWeights>,
    seed: u64,
    noise_scale: f64,
) -> Result<SplitEval> {
    let examples = restrict(&split.examples, modalities)?;
    let per: Vec<(f64, f64)> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let s = derive_seed(seed, i as u64);
            let out = match model.spec.mode {
                Mode::Regression => model.predict(params, ex)?,
                Mode::Refinement => model.refine(params, ex, s, noise_scale, None)?.image,
            };
            Ok((mse(&out, &ex.hr)?, ssim(&out, &ex.hr)?))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let m = per.iter().map(|p| p.0).sum::<f64>() / n;
    let gamma = match wbar {
        Some(w) if model.spec.mode == Mode::Regression && model.spec.routing != Routing::Off => {
            Some(routing_stats(model, params, &examples, w)?.gamma)
        }
        _ => None,
    };
    Ok(SplitEval {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: per.iter().map(|p| p.1).sum::<f64>() / n,
        gamma,
    })
}

/// Evaluates a saved checkpoint on `test` after checking that none of its
/// samples were used in training. The train MSE is filled in when `train` is the split the checkpoint was
/// trained on.
pub fn evaluate_checkpoint(path: &Path, train: &Split, test: &Split, experiment: &str) -> Result<MetricsRow> {
    let (model, params, meta) = load_checkpoint(path)?;
    check_disjoint(&meta.train_fingerprints, &test.fingerprints)?;
    let wbar = match meta.variant {
        Variant::Static => Some(model.spec.fusion.static_weights(&params)?),
        _ => meta.wbar.as_ref().map(|w| StaticWeights {
            values: Tensor::new(vec![w.len()], w.clone()).expect("nonempty w̄"),
        }),
    };
    let e = evaluate_split(&model, &params, test, &meta.modalities, wbar.as_ref(), meta.seed, meta.config.model.noise_scale)?;
    Ok(MetricsRow {
        experiment: experiment.to_string(),
        variant: meta.variant.label().to_string(),
        seed: meta.seed,
        train_mse: match train.fingerprints == meta.train_fingerprints {
            true => Some(evaluate_split(&model, &params, train, &meta.modalities, None, meta.seed, meta.config.model.noise_scale)?.mse),
            false => None,
        },
        heldout_mse: e.mse,
        psnr: e.psnr,
        ssim: e.ssim,
        gamma: e.gamma,
        seconds: 0.0,
    })
}
