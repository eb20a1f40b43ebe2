//! Dataset directory layout: `samples/{idx}/` holding `hr.m3t`, `lr.m3t`,
//! `modality_{name}.m3t`, `meta.json`, plus `hr.pgm`/`lr.pgm` previews.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::write_pgm;
use super::{DegradationRecord, Modality, ModalityBundle, ModalityTokens, RegionParams, SrSample};
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub regions: Vec<RegionParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityMeta {
    pub corruption_rate: f64,
    pub corrupted: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub seed: u64,
    pub scene: SceneMeta,
    pub degradation: DegradationRecord,
    pub projector_seed: u64,
    pub modalities: BTreeMap<String, ModalityMeta>,
}

/// Everything needed to rebuild a training example from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    pub meta: SampleMeta,
    pub hr: crate::numerics::Tensor,
    pub lr: crate::numerics::Tensor,
    pub bundle: ModalityBundle,
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join("samples").join(index.to_string())
}

pub fn write_sample(root: &Path, index: usize, sample: &SrSample, bundle: &ModalityBundle) -> Result<()> {
    let dir = sample_dir(root, index);
    fs::create_dir_all(&dir)?;
    write_tensor(&dir.join("hr.m3t"), &sample.hr)?;
    write_tensor(&dir.join("lr.m3t"), &sample.lr)?;
    write_pgm(&dir.join("hr.pgm"), &sample.hr)?;
    write_pgm(&dir.join("lr.pgm"), &sample.lr)?;
    let mut modalities = BTreeMap::new();
    for e in &bundle.entries {
        write_tensor(&dir.join(format!("modality_{}.m3t", e.modality)), &e.tokens)?;
        modalities.insert(
            e.modality.name().to_string(),
            ModalityMeta {
                corruption_rate: e.corruption_rate,
                corrupted: e.corrupted.clone(),
            },
        );
    }
    let meta = SampleMeta {
        index,
        seed: sample.seed,
        scene: SceneMeta {
            seed: sample.scene.seed,
            height: sample.scene.height,
            width: sample.scene.width,
            regions: sample.scene.regions.clone(),
        },
        degradation: sample.degradation.clone(),
        projector_seed: bundle.projector_seed,
        modalities,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_sample(root: &Path, index: usize) -> Result<StoredSample> {
    let dir = sample_dir(root, index);
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let hr = read_tensor(&dir.join("hr.m3t"))?;
    let lr = read_tensor(&dir.join("lr.m3t"))?;
    let mut entries = Vec::new();
    // keep canonical modality order regardless of map ordering
    for m in Modality::ALL {
        let Some(mm) = meta.modalities.get(m.name()) else { continue };
        let tokens = read_tensor(&dir.join(format!("modality_{m}.m3t")))?;
        if tokens.rows() != mm.corrupted.len() {
            return Err(Error::Format(format!(
                "modality {m}: {} tokens but {} mask entries",
                tokens.rows(),
                mm.corrupted.len()
            )));
        }
        entries.push(ModalityTokens {
            modality: m,
            tokens,
            corruption_rate: mm.corruption_rate,
            corrupted: mm.corrupted.clone(),
        });
    }
    let bundle = ModalityBundle {
        entries,
        projector_seed: meta.projector_seed,
    };
    Ok(StoredSample { meta, hr, lr, bundle })
}

/// Number of consecutive sample directories starting at index 0.
pub fn count_samples(root: &Path) -> usize {
    (0..)
        .take_while(|&i| sample_dir(root, i).join("meta.json").exists())
        .count()
}
