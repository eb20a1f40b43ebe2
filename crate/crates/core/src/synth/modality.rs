use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::image::{dims, patchify, pool_patches, sobel, upscale};
use super::scene::TEXTURE_CLASSES;
use super::SrSample;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng, Tensor};

/// Guidance modality kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Seg,
    Depth,
    Edge,
    Feat,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Seg, Modality::Depth, Modality::Edge, Modality::Feat];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Seg => "seg",
            Modality::Depth => "depth",
            Modality::Edge => "edge",
            Modality::Feat => "feat",
        }
    }

    /// Width of the per-patch raw feature vector before projection.
    pub fn raw_dim(self, patch: usize, channels: usize) -> usize {
        match self {
            Modality::Seg => TEXTURE_CLASSES.len(),
            Modality::Depth => 4,
            Modality::Edge => 7,
            Modality::Feat => patch * patch * channels,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "modality",
                name: s.to_string(),
            })
    }
}

/// Tokens of one modality for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTokens {
    pub modality: Modality,
    /// `[N_p × d]`
    pub tokens: Tensor,
    pub corruption_rate: f64,
    pub corrupted: Vec<bool>,
}

/// Per-sample guidance tokens, spatially aligned with the latent patches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    pub entries: Vec<ModalityTokens>,
    pub projector_seed: u64,
}

impl ModalityBundle {
    pub fn modalities(&self) -> Vec<Modality> {
        self.entries.iter().map(|e| e.modality).collect()
    }

    pub fn get(&self, m: Modality) -> Result<&ModalityTokens> {
        self.entries.iter().find(|e| e.modality == m).ok_or(Error::Lookup {
            kind: "modality",
            name: m.name().to_string(),
        })
    }

    /// Copy restricted to `keep`, in the order given.
    pub fn select(&self, keep: &[Modality]) -> Result<ModalityBundle> {
        Ok(ModalityBundle {
            entries: keep.iter().map(|&m| self.get(m).cloned()).collect::<Result<_>>()?,
            projector_seed: self.projector_seed,
        })
    }
}

/// Fixed random projections from raw per-patch features to `d`, shared by
/// every sample generated with the same seed.
#[derive(Clone, Debug)]
pub struct ModalityProjector {
    pub seed: u64,
    pub dim: usize,
    matrices: Vec<(Modality, Tensor)>,
}

impl ModalityProjector {
    pub fn new(seed: u64, dim: usize, patch: usize, channels: usize) -> Self {
        let matrices = Modality::ALL
            .iter()
            .map(|&m| {
                let raw = m.raw_dim(patch, channels);
                let mut rng = Rng::derive(seed, m as u64);
                let s = 1.0 / (raw as f64).sqrt();
                (m, Tensor::from_fn(&[raw, dim], |_| rng.normal() * s))
            })
            .collect();
        ModalityProjector { seed, dim, matrices }
    }

    pub fn matrix(&self, m: Modality) -> &Tensor {
        &self.matrices.iter().find(|(k, _)| *k == m).unwrap().1
    }

    pub fn project(&self, m: Modality, raw: &Tensor) -> Result<Tensor> {
        raw.matmul(self.matrix(m))
    }
}

/// Mean of `values` over each of the four `p/2 × p/2` quadrants of every patch.
fn quadrant_pool(values: &[f64], h: usize, w: usize, p: usize) -> Vec<[f64; 4]> {
    let half = (p / 2).max(1);
    let (gh, gw) = (h / p, w / p);
    (0..gh * gw)
        .map(|i| {
            let (py, px) = (i / gw, i % gw);
            let mut q = [0.0; 4];
            let mut counts = [0usize; 4];
            for dy in 0..p {
                for dx in 0..p {
                    let k = (dy / half).min(1) * 2 + (dx / half).min(1);
                    q[k] += values[(py * p + dy) * w + px * p + dx];
                    counts[k] += 1;
                }
            }
            for k in 0..4 {
                if counts[k] > 0 {
                    q[k] /= counts[k] as f64;
                }
            }
            q
        })
        .collect()
}

/// Per-patch raw features of one modality, `[N_p × raw_dim]`.
pub fn raw_features(sample: &SrSample, m: Modality, patch: usize) -> Result<Tensor> {
    let (h, w, _) = dims(&sample.hr)?;
    let scene = &sample.scene;
    let n_p = (h / patch) * (w / patch);
    match m {
        Modality::Seg => {
            let k = TEXTURE_CLASSES.len();
            let mut hist = vec![0.0; n_p * k];
            let gw = w / patch;
            let inv = 1.0 / (patch * patch) as f64;
            for y in 0..h {
                for x in 0..w {
                    let i = (y / patch) * gw + x / patch;
                    hist[i * k + scene.class_at(y * w + x)] += inv;
                }
            }
            Tensor::new(vec![n_p, k], hist)
        }
        Modality::Depth => {
            let q = quadrant_pool(&scene.depth, h, w, patch);
            let data = q.iter().flat_map(|r| r.map(|d| 2.0 * (d - 0.5))).collect();
            Tensor::new(vec![n_p, 4], data)
        }
        Modality::Edge => {
            let (gx, gy) = sobel(&sample.hr)?;
            let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
            let q = quadrant_pool(&mag, h, w, patch);
            let gxx: Vec<f64> = gx.iter().map(|v| v * v).collect();
            let gyy: Vec<f64> = gy.iter().map(|v| v * v).collect();
            let gxy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
            let (pxx, pyy, pxy) = (
                pool_patches(&gxx, h, w, patch),
                pool_patches(&gyy, h, w, patch),
                pool_patches(&gxy, h, w, patch),
            );
            let mut data = Vec::with_capacity(n_p * 7);
            for i in 0..n_p {
                data.extend_from_slice(&q[i]);
                data.extend_from_slice(&[pxx[i], pyy[i], pxy[i]]);
            }
            Tensor::new(vec![n_p, 7], data)
        }
        Modality::Feat => {
            let up = upscale(&sample.lr, h / sample.lr.shape()[0])?;
            Ok(patchify(&up, patch)?.map(|v| 2.0 * (v - 0.5)))
        }
    }
}

/// Builds the uncorrupted bundle for `modalities`.
pub fn extract_modalities(
    sample: &SrSample,
    projector: &ModalityProjector,
    modalities: &[Modality],
    patch: usize,
) -> Result<ModalityBundle> {
    if projector.dim < 8 {
        return Err(Error::Config(format!(
            "token dimension must be at least 8, got {}",
            projector.dim
        )));
    }
    let entries = modalities
        .iter()
        .map(|&m| {
            let tokens = projector.project(m, &raw_features(sample, m, patch)?)?;
            let n = tokens.rows();
            Ok(ModalityTokens {
                modality: m,
                tokens,
                corruption_rate: 0.0,
                corrupted: vec![false; n],
            })
        })
        .collect::<Result<_>>()?;
    Ok(ModalityBundle {
        entries,
        projector_seed: projector.seed,
    })
}

/// Replaces each token of `modality` with probability `rate` by the token of
/// a different, uniformly chosen patch of the same sample.
pub fn corrupt_modality(
    bundle: &ModalityBundle,
    modality: Modality,
    rate: f64,
    seed: u64,
) -> Result<ModalityBundle> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Domain(format!("corruption rate {rate} outside [0,1]")));
    }
    let mut out = bundle.clone();
    let entry = out
        .entries
        .iter_mut()
        .find(|e| e.modality == modality)
        .ok_or(Error::Lookup {
            kind: "modality",
            name: modality.name().to_string(),
        })?;
    let original = entry.tokens.clone();
    let (n, d) = (original.rows(), original.cols());
    let mut rng = Rng::new(derive_seed(seed, modality as u64));
    let data = entry.tokens.data_mut();
    for i in 0..n {
        if !rng.bernoulli(rate) {
            continue;
        }
        let j = if n > 1 {
            let r = rng.below(n - 1);
            if r >= i {
                r + 1
            } else {
                r
            }
        } else {
            i
        };
        data[i * d..(i + 1) * d].copy_from_slice(original.row(j));
        entry.corrupted[i] = true;
    }
    entry.corruption_rate = rate;
    Ok(out)
}
