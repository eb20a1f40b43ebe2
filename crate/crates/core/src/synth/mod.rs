//! Synthetic multi-modal super-resolution benchmark.
//!
//! Scenes are Voronoi partitions with per-region textures over a depth field.
//! From a scene we render the HR target, degrade it to LR, and synthesize four
//! aligned guidance token streams (segmentation, depth, edges, dense
//! features). Guidance can be corrupted by transplanting tokens between
//! patches, which mimics misclassified or misregistered extractor output.

mod degrade;
pub mod image;
mod modality;
mod scene;
pub mod store;

pub use degrade::{
    coarse_sr, degrade, CoarseSr, DegradationRecord, DownsampleKind, BLUR_RANGE, NOISE_RANGE,
};
pub use modality::{
    corrupt_modality, extract_modalities, raw_features, Modality, ModalityBundle,
    ModalityProjector, ModalityTokens,
};
pub use scene::{gen_scene, render_hr, RegionParams, Scene, TEXTURE_CLASSES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// HR side length (square images).
    pub hr_size: usize,
    pub channels: usize,
    pub scale: usize,
    /// Patch side on the HR grid.
    pub patch: usize,
    /// Inclusive region-count range.
    pub regions: (usize, usize),
    pub texture_amplitude: (f64, f64),
    pub depth_variation: f64,
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub quantize_prob: f64,
    pub token_dim: usize,
    pub projector_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            hr_size: 32,
            channels: 1,
            scale: 4,
            patch: 4,
            regions: (2, 6),
            texture_amplitude: (0.08, 0.25),
            depth_variation: 1.0,
            blur_sigma: BLUR_RANGE,
            noise_sigma: (0.0, 0.03),
            quantize_prob: 0.5,
            token_dim: 16,
            projector_seed: 0x005E_ED0F_7AC7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.patch == 0 || !self.hr_size.is_multiple_of(self.scale * self.patch) {
            return Err(Error::Config(format!(
                "HR size {} must be divisible by scale·patch = {}·{}",
                self.hr_size, self.scale, self.patch
            )));
        }
        if self.regions.0 == 0 || self.regions.0 > self.regions.1 {
            return Err(Error::Config(format!("bad region range {:?}", self.regions)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.token_dim < 8 {
            return Err(Error::Config(format!(
                "token dimension must be at least 8, got {}",
                self.token_dim
            )));
        }
        let (b, n) = (self.blur_sigma, self.noise_sigma);
        if b.0 > b.1 || b.0 < BLUR_RANGE.0 || b.1 > BLUR_RANGE.1 {
            return Err(Error::Config(format!("blur range {b:?} outside {BLUR_RANGE:?}")));
        }
        if n.0 > n.1 || n.0 < NOISE_RANGE.0 || n.1 > NOISE_RANGE.1 {
            return Err(Error::Config(format!("noise range {n:?} outside {NOISE_RANGE:?}")));
        }
        Ok(())
    }

    pub fn lr_size(&self) -> usize {
        self.hr_size / self.scale
    }

    pub fn n_patches(&self) -> usize {
        (self.hr_size / self.patch).pow(2)
    }

    pub fn projector(&self) -> ModalityProjector {
        ModalityProjector::new(self.projector_seed, self.token_dim, self.patch, self.channels)
    }
}

/// One benchmark instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SrSample {
    pub hr: Tensor,
    pub lr: Tensor,
    pub scene: Scene,
    pub degradation: DegradationRecord,
    pub seed: u64,
}

/// scene → HR render → degradation, all derived from `seed`.
pub fn generate_sample(cfg: &SynthConfig, seed: u64) -> Result<SrSample> {
    let scene = gen_scene(cfg, derive_seed(seed, 1))?;
    let hr = render_hr(&scene, cfg.channels)?;
    let degradation = DegradationRecord::sample(cfg, &mut Rng::derive(seed, 2));
    let lr = degrade(&hr, &degradation, cfg.scale, derive_seed(seed, 3))?;
    Ok(SrSample {
        hr,
        lr,
        scene,
        degradation,
        seed,
    })
}

/// Per-patch uncertainty `U(x)`, nonnegative, one entry per latent patch.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub values: Tensor,
}

impl UncertaintyMap {
    pub fn len(&self) -> usize {
        self.values.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.values.numel() == 0
    }

    /// Within-sample quantile bucket of each patch, in `0..buckets`. Ties
    /// share the bucket of their first rank.
    pub fn quantile_buckets(&self, buckets: usize) -> Vec<usize> {
        let v = self.values.data();
        let n = v.len();
        (0..n)
            .map(|i| {
                let below = v.iter().filter(|&&x| x < v[i]).count();
                (below * buckets / n).min(buckets - 1)
            })
            .collect()
    }
}

/// Patch-mean of the per-pixel L1 difference (summed over channels) between
/// the coarse SR estimate and plain bilinear upscaling.
pub fn uncertainty_map(lr: &Tensor, scale: usize, patch: usize) -> Result<UncertaintyMap> {
    uncertainty_map_with(lr, scale, patch, &CoarseSr::default())
}

pub fn uncertainty_map_with(
    lr: &Tensor,
    scale: usize,
    patch: usize,
    coarse: &CoarseSr,
) -> Result<UncertaintyMap> {
    let up = image::upscale(lr, scale)?;
    let sharp = coarse.apply(lr, scale)?;
    let (h, w, c) = image::dims(&up)?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("{h}×{w} not divisible into {patch}-patches")));
    }
    let per_pixel: Vec<f64> = (0..h * w)
        .map(|i| {
            (0..c)
                .map(|ch| (sharp.data()[i * c + ch] - up.data()[i * c + ch]).abs())
                .sum()
        })
        .collect();
    let pooled = image::pool_patches(&per_pixel, h, w, patch);
    let n = pooled.len();
    Ok(UncertaintyMap {
        values: Tensor::new(vec![n], pooled)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let cfg = SynthConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lr_size(), 8);
        assert_eq!(cfg.n_patches(), 64);
    }

    #[test]
    fn indivisible_size_is_config_error() {
        let cfg = SynthConfig { hr_size: 36, ..SynthConfig::default() };
        assert!(matches!(gen_scene(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sample_shapes_and_ranges() {
        let cfg = SynthConfig::default();
        let s = generate_sample(&cfg, 77).unwrap();
        assert_eq!(s.hr.shape(), &[32, 32, 1]);
        assert_eq!(s.lr.shape(), &[8, 8, 1]);
        assert!(s.hr.data().iter().chain(s.lr.data()).all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(generate_sample(&cfg, 77).unwrap(), s);
    }

    #[test]
    fn uncertainty_zero_without_sharpening() {
        let s = generate_sample(&SynthConfig::default(), 4).unwrap();
        let u = uncertainty_map_with(&s.lr, 4, 4, &CoarseSr { amount: 0.0, radius: 1 }).unwrap();
        assert_eq!(u.len(), 64);
        assert!(u.values.data().iter().all(|&v| v == 0.0));
        let u = uncertainty_map(&s.lr, 4, 4).unwrap();
        assert!(u.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn quantile_buckets_cover_range() {
        let u = UncertaintyMap {
            values: Tensor::new(vec![16], (0..16).map(|i| i as f64).collect()).unwrap(),
        };
        let b = u.quantile_buckets(8);
        assert_eq!(b, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7]);
    }

    #[test]
    fn uncertainty_matches_brute_force_pooling() {
        let s = generate_sample(&SynthConfig::default(), 21).unwrap();
        let up = image::upscale(&s.lr, 4).unwrap();
        let sharp = coarse_sr(&s.lr, 4).unwrap();
        let u = uncertainty_map(&s.lr, 4, 4).unwrap();
        for py in 0..8 {
            for px in 0..8 {
                let mut acc = 0.0;
                for y in py * 4..py * 4 + 4 {
                    for x in px * 4..px * 4 + 4 {
                        acc += (sharp.data()[y * 32 + x] - up.data()[y * 32 + x]).abs();
                    }
                }
                assert!((u.values.data()[py * 8 + px] - acc / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uncertainty_is_higher_on_textured_patches() {
        let cfg = SynthConfig::default();
        let scenes = 200;
        let mut wins = 0;
        for seed in 0..scenes {
            let s = generate_sample(&cfg, 1000 + seed).unwrap();
            let u = uncertainty_map(&s.lr, cfg.scale, cfg.patch).unwrap();
            let (gx, gy) = image::sobel(&s.hr).unwrap();
            let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * a + b * b).collect();
            let energy = image::pool_patches(&mag, 32, 32, 4);
            let mut sorted = energy.clone();
            sorted.sort_by(f64::total_cmp);
            let median = 0.5 * (sorted[31] + sorted[32]);
            let (mut hi, mut nh, mut lo, mut nl) = (0.0, 0, 0.0, 0);
            for (e, v) in energy.iter().zip(u.values.data()) {
                if *e > median {
                    hi += v;
                    nh += 1;
                } else {
                    lo += v;
                    nl += 1;
                }
            }
            if nh > 0 && nl > 0 && hi / nh as f64 > lo / nl as f64 {
                wins += 1;
            }
        }
        // one-sided sign test at p < 0.01 needs at least 117 of 200
        assert!(wins >= 117, "{wins}/200");
    }
}
