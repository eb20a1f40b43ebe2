use serde::{Deserialize, Serialize};

use super::image::{box_blur, downsample_box, gaussian_blur, resize_bilinear, upscale};
use super::SynthConfig;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleKind {
    Box,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub quantize: bool,
    pub downsample: DownsampleKind,
}

pub const BLUR_RANGE: (f64, f64) = (0.5, 2.0);
pub const NOISE_RANGE: (f64, f64) = (0.0, 0.05);

impl DegradationRecord {
    pub fn sample(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        DegradationRecord {
            blur_sigma: rng.range(cfg.blur_sigma.0, cfg.blur_sigma.1),
            noise_sigma: rng.range(cfg.noise_sigma.0, cfg.noise_sigma.1),
            quantize: rng.bernoulli(cfg.quantize_prob),
            downsample: if rng.bernoulli(0.5) {
                DownsampleKind::Box
            } else {
                DownsampleKind::Bilinear
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(BLUR_RANGE.0..=BLUR_RANGE.1).contains(&self.blur_sigma) {
            return Err(Error::Domain(format!(
                "blur sigma {} outside [{}, {}]",
                self.blur_sigma, BLUR_RANGE.0, BLUR_RANGE.1
            )));
        }
        if !(NOISE_RANGE.0..=NOISE_RANGE.1).contains(&self.noise_sigma) {
            return Err(Error::Domain(format!(
                "noise sigma {} outside [{}, {}]",
                self.noise_sigma, NOISE_RANGE.0, NOISE_RANGE.1
            )));
        }
        Ok(())
    }
}

/// Blur → downsample → Gaussian noise → optional 8-bit quantization, clamped
/// to `[0,1]`.
pub fn degrade(hr: &Tensor, record: &DegradationRecord, scale: usize, seed: u64) -> Result<Tensor> {
    record.validate()?;
    let blurred = gaussian_blur(hr, record.blur_sigma)?;
    let small = match record.downsample {
        DownsampleKind::Box => downsample_box(&blurred, scale)?,
        DownsampleKind::Bilinear => {
            let s = blurred.shape();
            if s[0] % scale != 0 || s[1] % scale != 0 {
                return Err(Error::Config(format!("image {s:?} not divisible by scale {scale}")));
            }
            resize_bilinear(&blurred, s[0] / scale, s[1] / scale)?
        }
    };
    let mut rng = Rng::new(seed);
    let noise = record.noise_sigma;
    let mut out = small;
    for v in out.data_mut() {
        if noise > 0.0 {
            *v += noise * rng.normal();
        }
        *v = v.clamp(0.0, 1.0);
        if record.quantize {
            *v = (*v * 255.0).round() / 255.0;
        }
    }
    Ok(out)
}

/// Deterministic stand-in for a learned coarse SR model: bilinear upscale
/// followed by unsharp masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseSr {
    pub amount: f64,
    pub radius: usize,
}

impl Default for CoarseSr {
    fn default() -> Self {
        CoarseSr {
            amount: 0.6,
            radius: 1,
        }
    }
}

impl CoarseSr {
    pub fn apply(&self, lr: &Tensor, scale: usize) -> Result<Tensor> {
        let up = upscale(lr, scale)?;
        if self.amount == 0.0 {
            return Ok(up);
        }
        let soft = box_blur(&up, self.radius)?;
        let a = self.amount;
        up.zip_map(&soft, "unsharp", |u, b| (u + a * (u - b)).clamp(0.0, 1.0))
    }
}

pub fn coarse_sr(lr: &Tensor, scale: usize) -> Result<Tensor> {
    CoarseSr::default().apply(lr, scale)
}
