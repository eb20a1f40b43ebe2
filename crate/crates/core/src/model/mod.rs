//! Toy SR model around the fusion layer.
//!
//! `embed` stands in for a VAE encoder: bilinear upscale, patchify, linear
//! projection plus a learned position table. In regression mode the
//! prediction is `up(lr) + g(h)` where `g` is a per-patch two-layer MLP,
//! de-patchified and smoothed by a depthwise 3×3 kernel. Refinement mode
//! instead runs a few ancestral denoising steps on the residual `hr − up(lr)`
//! with the fused feature recomputed at every step.

mod refine;

pub use refine::{refine_sample, NoiseSchedule, RefineOutput, StepDump, StepRecord, Temperatures};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{router_features, FusionLayer, TemperatureEval, Weighting};
use crate::numerics::{ParamSet, Rng, Tape, Tensor, Var};
use crate::synth::image::{depatchify_index, patchify, upscale};
use crate::synth::{uncertainty_map, Modality, ModalityBundle, UncertaintyMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Regression,
    Refinement,
}

/// How expert outputs enter the fused feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    /// Per-patch weights from the uncertainty router.
    Dynamic,
    /// One learned weight per modality.
    Static,
    /// No guidance: `h = z_x`.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hr_size: usize,
    pub channels: usize,
    pub scale: usize,
    pub patch: usize,
    pub fusion: FusionLayer,
    pub routing: Routing,
    pub mode: Mode,
    /// Timestep fed to the temperature schedule in regression mode.
    pub regression_t: f64,
    pub refine_steps: usize,
}

impl ModelSpec {
    pub fn n_patches(&self) -> usize {
        (self.hr_size / self.patch).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn latent_dim(&self) -> usize {
        self.fusion.dims.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.scale == 0 || !self.hr_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "HR size {} not divisible into {}-patches",
                self.hr_size, self.patch
            )));
        }
        if !(0.0..=1.0).contains(&self.regression_t) {
            return Err(Error::Config(format!(
                "regression timestep {} outside [0,1]",
                self.regression_t
            )));
        }
        if self.mode == Mode::Refinement && self.refine_steps == 0 {
            return Err(Error::Config("refinement needs at least one step".into()));
        }
        if self.routing == Routing::Off && !self.fusion.modalities.is_empty() {
            return Err(Error::Config("routing off but modalities configured".into()));
        }
        if self.routing != Routing::Off && self.fusion.modalities.is_empty() {
            return Err(Error::Config("fusion needs at least one modality".into()));
        }
        Ok(())
    }
}

/// One model input with everything derived from the LR image precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub lr: Tensor,
    pub hr: Tensor,
    pub up: Tensor,
    /// `[N_p × p²C]` patches of `up`.
    pub up_patches: Tensor,
    pub uncertainty: UncertaintyMap,
    pub router_features: Tensor,
    pub bundle: ModalityBundle,
}

impl Example {
    pub fn new(spec: &ModelSpec, lr: Tensor, hr: Tensor, bundle: ModalityBundle) -> Result<Self> {
        let up = upscale(&lr, spec.scale)?;
        if up.shape() != hr.shape() {
            return Err(Error::dim("example", up.shape(), hr.shape()));
        }
        let up_patches = patchify(&up, spec.patch)?;
        let uncertainty = uncertainty_map(&lr, spec.scale, spec.patch)?;
        let router_features = router_features(&uncertainty, spec.fusion.dims.buckets);
        Ok(Example {
            lr,
            hr,
            up,
            up_patches,
            uncertainty,
            router_features,
            bundle,
        })
    }

    /// Same example with the modality bundle restricted to `keep`.
    pub fn with_modalities(&self, keep: &[Modality]) -> Result<Example> {
        Ok(Example {
            bundle: self.bundle.select(keep)?,
            ..self.clone()
        })
    }
}

/// Nodes recorded by one fusion pass.
#[derive(Clone, Debug)]
pub struct FusionTrace {
    pub z: Var,
    pub h: Var,
    pub experts: Vec<Var>,
    /// `[M × N_p]` router weights or `[M]` static weights.
    pub weights: Option<Var>,
    pub temperatures: Vec<(Modality, TemperatureEval)>,
}

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

fn p(tape: &mut Tape, params: &ParamSet, name: &str) -> Result<Var> {
    Ok(tape.param(name, params.get(name)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrModel {
    pub spec: ModelSpec,
}

impl SrModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(SrModel { spec })
    }

    /// Parameters for every component used by this spec. Fusion, embedder
    /// and head draw from separate streams so variants sharing a seed share
    /// their embedder initialization.
    pub fn init(&self, seed: u64) -> ParamSet {
        let s = &self.spec;
        let (dh, pl) = (s.latent_dim(), s.patch_len());
        let mut params = ParamSet::new();
        let mut rng = Rng::derive(seed, 10);
        params.insert("embed.proj", normal(&mut rng, &[pl, dh], (pl as f64).powf(-0.5)));
        params.insert("embed.pos", normal(&mut rng, &[s.n_patches(), dh], 0.1));
        if s.routing != Routing::Off {
            params.extend(s.fusion.init(&mut Rng::derive(seed, 11)));
            if s.routing == Routing::Static {
                params.retain(|n| !n.starts_with("router."));
            } else {
                params.remove(crate::fusion::STATIC_LOGITS);
            }
        }
        let mut rng = Rng::derive(seed, 12);
        let hs = (dh as f64).powf(-0.5);
        match s.mode {
            Mode::Regression => {
                params.insert("decoder.w1", normal(&mut rng, &[dh, dh], hs));
                params.insert("decoder.b1", Tensor::zeros(&[dh]));
                params.insert("decoder.w2", normal(&mut rng, &[dh, pl], 0.1 * hs));
                params.insert("decoder.b2", Tensor::zeros(&[pl]));
                params.insert("decoder.smooth", identity_kernel(s.channels));
            }
            Mode::Refinement => {
                let td = s.fusion.dims.time_dim;
                let fin = pl + dh + td;
                params.insert("refiner.w1", normal(&mut rng, &[fin, dh], (fin as f64).powf(-0.5)));
                params.insert("refiner.b1", Tensor::zeros(&[dh]));
                params.insert("refiner.w2", normal(&mut rng, &[dh, pl], 0.1 * hs));
                params.insert("refiner.b2", Tensor::zeros(&[pl]));
            }
        }
        params
    }

    pub fn embed_tape(&self, tape: &mut Tape, params: &ParamSet, ex: &Example) -> Result<Var> {
        let x = tape.constant(ex.up_patches.clone());
        let w = p(tape, params, "embed.proj")?;
        let pos = p(tape, params, "embed.pos")?;
        let z = tape.matmul(x, w)?;
        tape.add(z, pos)
    }

    /// `h` from a recorded latent `z` at timestep `t`.
    pub fn fuse_tape(&self, tape: &mut Tape, params: &ParamSet, ex: &Example, z: Var, t: f64) -> Result<FusionTrace> {
        let layer = &self.spec.fusion;
        if self.spec.routing == Routing::Off {
            return Ok(FusionTrace {
                z,
                h: z,
                experts: Vec::new(),
                weights: None,
                temperatures: Vec::new(),
            });
        }
        let experts = layer.experts_tape(tape, params, z, &ex.bundle, t)?;
        let weights = match self.spec.routing {
            Routing::Dynamic => layer.route_tape(tape, params, z, &ex.router_features)?,
            _ => layer.static_tape(tape, params)?,
        };
        let weighting = match self.spec.routing {
            Routing::Dynamic => Weighting::PerPatch(weights),
            _ => Weighting::Static(weights),
        };
        let h = layer.combine_tape(tape, z, &experts, weighting)?;
        let temperatures = layer
            .modalities
            .iter()
            .map(|&m| Ok((m, layer.temperature(params, m, t)?)))
            .collect::<Result<_>>()?;
        Ok(FusionTrace {
            z,
            h,
            experts,
            weights: Some(weights),
            temperatures,
        })
    }

    /// `g(h)`: per-patch MLP → de-patchify → depthwise smoothing.
    pub fn decode_tape(&self, tape: &mut Tape, params: &ParamSet, h: Var) -> Result<Var> {
        let w1 = p(tape, params, "decoder.w1")?;
        let b1 = p(tape, params, "decoder.b1")?;
        let w2 = p(tape, params, "decoder.w2")?;
        let b2 = p(tape, params, "decoder.b2")?;
        let k = p(tape, params, "decoder.smooth")?;
        let a = tape.matmul(h, w1)?;
        let a = tape.add_row(a, b1)?;
        let a = tape.gelu(a);
        let out = tape.matmul(a, w2)?;
        let out = tape.add_row(out, b2)?;
        let img = self.depatchify_tape(tape, out)?;
        tape.depthwise_conv3x3(img, k)
    }

    pub(crate) fn depatchify_tape(&self, tape: &mut Tape, patches: Var) -> Result<Var> {
        let s = &self.spec;
        let idx = depatchify_index(s.hr_size, s.hr_size, s.channels, s.patch)?;
        tape.gather(patches, idx, &[s.hr_size, s.hr_size, s.channels])
    }

    /// Unclamped regression prediction `up + g(h)`.
    pub fn head_tape(&self, tape: &mut Tape, params: &ParamSet, ex: &Example, h: Var) -> Result<Var> {
        let g = self.decode_tape(tape, params, h)?;
        let up = tape.constant(ex.up.clone());
        tape.add(up, g)
    }

    /// `φ(h) = MSE(up + g(h), hr)`.
    pub fn phi_tape(&self, tape: &mut Tape, params: &ParamSet, ex: &Example, h: Var) -> Result<Var> {
        let pred = self.head_tape(tape, params, ex, h)?;
        let y = tape.constant(ex.hr.clone());
        tape.mse(pred, y)
    }

    fn require(&self, mode: Mode) -> Result<()> {
        if self.spec.mode != mode {
            return Err(Error::Mode(format!(
                "operation needs {mode:?} mode, model is {:?}",
                self.spec.mode
            )));
        }
        Ok(())
    }

    /// Regression forward pass; returns the trace and the unclamped
    /// prediction node.
    pub fn forward_tape(&self, tape: &mut Tape, params: &ParamSet, ex: &Example) -> Result<(FusionTrace, Var)> {
        self.require(Mode::Regression)?;
        let z = self.embed_tape(tape, params, ex)?;
        let trace = self.fuse_tape(tape, params, ex, z, self.spec.regression_t)?;
        let pred = self.head_tape(tape, params, ex, trace.h)?;
        Ok((trace, pred))
    }

    /// Training loss for one example. Refinement draws its timestep and
    /// noise from `rng`.
    pub fn loss_tape(&self, tape: &mut Tape, params: &ParamSet, ex: &Example, rng: &mut Rng) -> Result<(FusionTrace, Var)> {
        match self.spec.mode {
            Mode::Regression => {
                let (trace, pred) = self.forward_tape(tape, params, ex)?;
                let y = tape.constant(ex.hr.clone());
                let loss = tape.mse(pred, y)?;
                Ok((trace, loss))
            }
            Mode::Refinement => {
                let sched = NoiseSchedule::linear(self.spec.refine_steps);
                let k = 1 + rng.below(sched.steps());
                let residual = patchify(&ex.hr.sub(&ex.up)?, self.spec.patch)?;
                let ab = sched.alpha_bar(k);
                let noisy = residual.map(|r| ab.sqrt() * r + (1.0 - ab).sqrt() * rng.normal());
                let t = k as f64 / sched.steps() as f64;
                let z = self.embed_tape(tape, params, ex)?;
                let trace = self.fuse_tape(tape, params, ex, z, t)?;
                let x0 = self.denoise_tape(tape, params, &noisy, trace.h, t)?;
                let target = tape.constant(residual);
                let loss = tape.mse(x0, target)?;
                Ok((trace, loss))
            }
        }
    }

    /// Predicts the clean residual patches from noisy ones.
    pub fn denoise_tape(&self, tape: &mut Tape, params: &ParamSet, noisy: &Tensor, h: Var, t: f64) -> Result<Var> {
        let n = noisy.rows();
        let td = self.spec.fusion.dims.time_dim;
        let emb = crate::fusion::time_embedding(t, td);
        let rows = Tensor::from_fn(&[n, td], |i| emb.data()[i % td]);
        let x = tape.constant(noisy.clone());
        let e = tape.constant(rows);
        let inp = tape.concat_cols(x, h)?;
        let inp = tape.concat_cols(inp, e)?;
        let w1 = p(tape, params, "refiner.w1")?;
        let b1 = p(tape, params, "refiner.b1")?;
        let w2 = p(tape, params, "refiner.w2")?;
        let b2 = p(tape, params, "refiner.b2")?;
        let a = tape.matmul(inp, w1)?;
        let a = tape.add_row(a, b1)?;
        let a = tape.gelu(a);
        let out = tape.matmul(a, w2)?;
        tape.add_row(out, b2)
    }

    /// Regression output clamped to `[0,1]`.
    pub fn predict(&self, params: &ParamSet, ex: &Example) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, pred) = self.forward_tape(&mut tape, params, ex)?;
        Ok(tape.value(pred).map(|v| v.clamp(0.0, 1.0)))
    }

    /// Runs the refiner with `h` recomputed at every step.
    pub fn refine(
        &self,
        params: &ParamSet,
        ex: &Example,
        seed: u64,
        noise_scale: f64,
        dump: Option<StepDump>,
    ) -> Result<RefineOutput> {
        self.require(Mode::Refinement)?;
        let mut provider = |t: f64| -> Result<(Tensor, Vec<(Modality, TemperatureEval)>)> {
            let mut tape = Tape::new();
            let z = self.embed_tape(&mut tape, params, ex)?;
            let trace = self.fuse_tape(&mut tape, params, ex, z, t)?;
            Ok((tape.value(trace.h).clone(), trace.temperatures))
        };
        let mut denoiser = |x: &Tensor, h: &Tensor, t: f64| -> Result<Tensor> {
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let out = self.denoise_tape(&mut tape, params, x, hv, t)?;
            Ok(tape.value(out).clone())
        };
        refine_sample(
            &ex.up,
            self.spec.patch,
            &NoiseSchedule::linear(self.spec.refine_steps),
            &mut provider,
            &mut denoiser,
            seed,
            noise_scale,
            dump,
        )
    }

    /// Final image for evaluation in either mode.
    pub fn output(&self, params: &ParamSet, ex: &Example, seed: u64) -> Result<Tensor> {
        match self.spec.mode {
            Mode::Regression => self.predict(params, ex),
            Mode::Refinement => Ok(self.refine(params, ex, seed, 1.0, None)?.image),
        }
    }
}

/// Kernel with a single centre tap per channel.
pub fn identity_kernel(channels: usize) -> Tensor {
    Tensor::from_fn(&[channels, 9], |i| if i % 9 == 4 { 1.0 } else { 0.0 })
}

/// `z_x` for one LR image.
pub fn embed(model: &SrModel, params: &ParamSet, ex: &Example) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = model.embed_tape(&mut tape, params, ex)?;
    Ok(tape.value(z).clone())
}

/// `g(h)` as an image.
pub fn decode(model: &SrModel, params: &ParamSet, h: &Tensor) -> Result<Tensor> {
    let s = &model.spec;
    if h.shape() != [s.n_patches(), s.latent_dim()] {
        return Err(Error::dim("decode", h.shape(), &[s.n_patches(), s.latent_dim()]));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let out = model.decode_tape(&mut tape, params, hv)?;
    Ok(tape.value(out).clone())
}

pub fn loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("loss", pred.shape(), target.shape()));
    }
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}
