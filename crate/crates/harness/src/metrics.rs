//! Image quality metrics on `[0,1]` images.

use m3esr_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const PSNR_CAP: f64 = 99.0;

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(m3esr_core::model::loss(pred, target)?)
}

/// `10·log10(1/mse)`, capped at 99 dB.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over every valid
/// window position, averaged over channels. Images smaller than the window
/// use a single window clipped to the image.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w, c) = m3esr_core::synth::image::dims(a)?;
    if a.shape() != b.shape() {
        return Err(m3esr_core::Error::Dimension {
            op: "ssim",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }
        .into());
    }
    let g = gaussian_window();
    let (wy, wx) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let (oy, ox) = ((SSIM_WINDOW - wy) / 2, (SSIM_WINDOW - wx) / 2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let px = |img: &Tensor, y: usize, x: usize| img.data()[(y * w + x) * c + ch];
        for y0 in 0..=h - wy {
            for x0 in 0..=w - wx {
                let (mut sw, mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..wy {
                    for dx in 0..wx {
                        let k = g[oy + dy] * g[ox + dx];
                        let (va, vb) = (px(a, y0 + dy, x0 + dx), px(b, y0 + dy, x0 + dx));
                        sw += k;
                        ma += k * va;
                        mb += k * vb;
                        aa += k * va * va;
                        bb += k * vb * vb;
                        ab += k * va * vb;
                    }
                }
                let (ma, mb) = (ma / sw, mb / sw);
                let va = aa / sw - ma * ma;
                let vb = bb / sw - mb * mb;
                let cov = ab / sw - ma * mb;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// One line of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    /// Absent when the training split was not available to the evaluator.
    pub train_mse: Option<f64>,
    pub heldout_mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Γ_MoE of the model on the held-out split, when measured.
    pub gamma: Option<f64>,
    /// Wall-clock training time. Kept out of the reproducible tables.
    #[serde(skip)]
    pub seconds: f64,
}

impl MetricsRow {
    /// Generalization gap, held-out minus train MSE.
    pub fn gap(&self) -> Option<f64> {
        self.train_mse.map(|t| self.heldout_mse - t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64) -> Tensor {
        let mut rng = m3esr_core::numerics::Rng::new(seed);
        Tensor::from_fn(&[16, 16, 1], |_| rng.uniform())
    }

    #[test]
    fn identical_images() {
        let a = img(1);
        assert_eq!(psnr_from_mse(mse(&a, &a).unwrap()), PSNR_CAP);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn psnr_of_one_percent_is_twenty() {
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert!((psnr_from_mse(0.001) - 30.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1e-12), PSNR_CAP);
    }

    #[test]
    fn ssim_matches_direct_window_formula() {
        // brute force at one 11×11 position on an 11×11 image
        let a = Tensor::from_fn(&[11, 11, 1], |i| (i as f64 * 0.37).sin() * 0.5 + 0.5);
        let b = Tensor::from_fn(&[11, 11, 1], |i| (i as f64 * 0.21).cos() * 0.4 + 0.5);
        let g = gaussian_window();
        let (mut ma, mut mb) = (0.0, 0.0);
        for y in 0..11 {
            for x in 0..11 {
                ma += g[y] * g[x] * a.data()[y * 11 + x];
                mb += g[y] * g[x] * b.data()[y * 11 + x];
            }
        }
        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
        for y in 0..11 {
            for x in 0..11 {
                let k = g[y] * g[x];
                let (da, db) = (a.data()[y * 11 + x] - ma, b.data()[y * 11 + x] - mb);
                va += k * da * da;
                vb += k * db * db;
                cov += k * da * db;
            }
        }
        let want = ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_drops_with_noise() {
        let a = img(2);
        let mut rng = m3esr_core::numerics::Rng::new(3);
        let b = a.map(|v| (v + 0.2 * rng.normal()).clamp(0.0, 1.0));
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.95 && s > -1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }
}
