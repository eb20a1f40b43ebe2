use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::TemperatureEval;
use crate::numerics::{Rng, Tensor};
use crate::synth::image::{depatchify, dims, patchify};
use crate::synth::Modality;

/// Per-modality temperatures reported alongside a fused feature.
pub type Temperatures = Vec<(Modality, TemperatureEval)>;
/// Receives each intermediate residual estimate with its step index.
pub type StepDump<'a> = &'a mut dyn FnMut(usize, &Tensor) -> Result<()>;

/// Cumulative signal levels `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `ᾱ_k = 1 − 0.98·k/T`.
    pub fn linear(steps: usize) -> Self {
        let t = steps.max(1) as f64;
        NoiseSchedule {
            alpha_bar: (0..=steps.max(1)).map(|k| 1.0 - 0.98 * k as f64 / t).collect(),
        }
    }

    /// `levels[k-1] = ᾱ_k` for `k = 1..=T`.
    pub fn new(levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        let mut alpha_bar = vec![1.0];
        alpha_bar.extend_from_slice(levels);
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) || alpha_bar.iter().any(|&a| a <= 0.0) {
            return Err(Error::Config(format!("schedule {levels:?} not strictly decreasing in (0,1)")));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub temperatures: Vec<(Modality, TemperatureEval)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutput {
    pub image: Tensor,
    pub steps: Vec<StepRecord>,
}

/// Ancestral sampling of the HR residual relative to `up`.
///
/// Starting from `x_T ~ N(0, s²I)` with `s = noise_scale`, each step `k`
/// (normalized `t = k/T`) asks `provider` for the fused feature, predicts the
/// clean residual with `denoiser`, and draws `x_{k−1}` from the Gaussian
/// posterior. The final clean estimate is added to `up` and clamped.
#[allow(clippy::too_many_arguments)]
pub fn refine_sample(
    up: &Tensor,
    patch: usize,
    schedule: &NoiseSchedule,
    provider: &mut dyn FnMut(f64) -> Result<(Tensor, Temperatures)>,
    denoiser: &mut dyn FnMut(&Tensor, &Tensor, f64) -> Result<Tensor>,
    seed: u64,
    noise_scale: f64,
    mut dump: Option<StepDump>,
) -> Result<RefineOutput> {
    let (h, w, c) = dims(up)?;
    let shape = patchify(up, patch)?.shape().to_vec();
    let big_t = schedule.steps();
    let mut rng = Rng::new(seed);
    let mut x = Tensor::from_fn(&shape, |_| noise_scale * rng.normal());
    let mut steps = Vec::with_capacity(big_t);
    let mut x0 = Tensor::zeros(&shape);
    for k in (1..=big_t).rev() {
        let t = k as f64 / big_t as f64;
        let (feat, temperatures) = provider(t)?;
        steps.push(StepRecord { step: k, t, temperatures });
        x0 = denoiser(&x, &feat, t)?;
        if x0.shape() != x.shape() {
            return Err(Error::dim("denoiser", x.shape(), x0.shape()));
        }
        if k > 1 {
            let (ab, ab_prev) = (schedule.alpha_bar(k), schedule.alpha_bar(k - 1));
            let alpha = ab / ab_prev;
            let beta = 1.0 - alpha;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ck = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let sd = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt() * noise_scale;
            let mean = x0.zip_map(&x, "posterior", |a, b| c0 * a + ck * b)?;
            x = mean.map(|m| m + sd * rng.normal());
        } else {
            x = x0.clone();
        }
        if let Some(f) = dump.as_mut() {
            let img = up.add(&depatchify(&x, h, w, c, patch)?)?;
            f(k, &img)?;
        }
    }
    let residual = depatchify(&x0, h, w, c, patch)?;
    let image = up.zip_map(&residual, "refine", |a, b| (a + b).clamp(0.0, 1.0))?;
    Ok(RefineOutput { image, steps })
}
