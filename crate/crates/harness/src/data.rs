//! Train and held-out splits of the synthetic benchmark.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use m3esr_core::model::{Example, ModelSpec, Routing};
use m3esr_core::numerics::{derive_seed, Tensor};
use m3esr_core::synth::store::{count_samples, read_sample, write_sample};
use m3esr_core::synth::{corrupt_modality, extract_modalities, generate_sample, ModalityBundle, SrSample};
use m3esr_core::fusion::TemperatureMode;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, ExperimentConfig};
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    fn stream(self) -> u64 {
        match self {
            SplitKind::Train => 0x0074_7261_696e,
            SplitKind::Test => 0x7465_7374,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

pub fn sample_seed(data_seed: u64, split: SplitKind, index: usize) -> u64 {
    derive_seed(derive_seed(data_seed, split.stream()), index as u64)
}

/// Content hash of an (HR, LR) pair, used to prove split disjointness.
pub fn fingerprint(hr: &Tensor, lr: &Tensor) -> String {
    let mut h = Sha256::new();
    for t in [hr, lr] {
        for s in t.shape() {
            h.update((*s as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct Split {
    pub kind: SplitKind,
    pub examples: Vec<Example>,
    pub fingerprints: Vec<String>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Digest of the ordered fingerprint list.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.fingerprints {
            h.update(f.as_bytes());
        }
        h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
}

/// Fails if any held-out fingerprint also occurs in `train`.
pub fn check_disjoint(train: &[String], test: &[String]) -> Result<()> {
    let seen: BTreeSet<&String> = train.iter().collect();
    let overlap = test.iter().filter(|f| seen.contains(f)).count();
    if overlap > 0 {
        return Err(HarnessError::Contamination(format!(
            "{overlap} held-out samples also appear in the training split"
        )));
    }
    Ok(())
}

/// Reference spec used to precompute router inputs; shared by all variants.
fn example_spec(cfg: &ExperimentConfig) -> Result<ModelSpec> {
    cfg.spec(Routing::Dynamic, &cfg.data.modalities, TemperatureMode::Scheduled)
}

fn corrupted_bundle(data: &DataConfig, sample: &SrSample) -> Result<ModalityBundle> {
    let projector = data.synth.projector();
    let mut bundle = extract_modalities(sample, &projector, &data.modalities, data.synth.patch)?;
    for (&m, &rate) in &data.corruption {
        if rate > 0.0 {
            bundle = corrupt_modality(&bundle, m, rate, derive_seed(sample.seed, 100))?;
        }
    }
    Ok(bundle)
}

fn generate_split(cfg: &ExperimentConfig, kind: SplitKind, n: usize) -> Result<(Split, Vec<(SrSample, ModalityBundle)>)> {
    let spec = example_spec(cfg)?;
    let raw: Vec<(SrSample, ModalityBundle)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(&cfg.data.synth, sample_seed(cfg.data.seed, kind, i))?;
            let b = corrupted_bundle(&cfg.data, &s)?;
            Ok((s, b))
        })
        .collect::<Result<_>>()?;
    let examples = raw
        .par_iter()
        .map(|(s, b)| Ok(Example::new(&spec, s.lr.clone(), s.hr.clone(), b.clone())?))
        .collect::<Result<Vec<_>>>()?;
    let fingerprints = raw.iter().map(|(s, _)| fingerprint(&s.hr, &s.lr)).collect();
    Ok((
        Split {
            kind,
            examples,
            fingerprints,
        },
        raw,
    ))
}

/// Builds both splits in memory from the data config alone.
pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (train, _) = generate_split(cfg, SplitKind::Train, cfg.data.n_train)?;
    let (test, _) = generate_split(cfg, SplitKind::Test, cfg.data.n_test)?;
    check_disjoint(&train.fingerprints, &test.fingerprints)?;
    Ok(Dataset { train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub data: DataConfig,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub const MANIFEST: &str = "dataset.json";

/// Writes both splits under `root/{train,test}/samples/{idx}/` plus a
/// manifest, and returns the dataset.
pub fn write_dataset(cfg: &ExperimentConfig, root: &Path) -> Result<Dataset> {
    let mut splits = Vec::new();
    for (kind, n) in [(SplitKind::Train, cfg.data.n_train), (SplitKind::Test, cfg.data.n_test)] {
        let (split, raw) = generate_split(cfg, kind, n)?;
        let dir = root.join(kind.name());
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        for (i, (s, b)) in raw.iter().enumerate() {
            write_sample(&dir, i, s, b)?;
        }
        splits.push(split);
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    check_disjoint(&train.fingerprints, &test.fingerprints)?;
    let manifest = DatasetManifest {
        data: cfg.data.clone(),
        train: train.fingerprints.clone(),
        test: test.fingerprints.clone(),
    };
    fs::write(root.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(Dataset { train, test })
}

fn read_split(cfg: &ExperimentConfig, root: &Path, kind: SplitKind, expected: &[String]) -> Result<Split> {
    let spec = example_spec(cfg)?;
    let dir = root.join(kind.name());
    let n = count_samples(&dir);
    if n != expected.len() {
        return Err(HarnessError::Config(format!(
            "{}: manifest lists {} samples, found {n}",
            dir.display(),
            expected.len()
        )));
    }
    let examples: Vec<Example> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = read_sample(&dir, i)?;
            Ok(Example::new(&spec, s.lr, s.hr, s.bundle)?)
        })
        .collect::<Result<_>>()?;
    let fingerprints: Vec<String> = examples.iter().map(|e| fingerprint(&e.hr, &e.lr)).collect();
    if fingerprints != expected {
        return Err(HarnessError::Config(format!(
            "{}: sample contents do not match the manifest",
            dir.display()
        )));
    }
    Ok(Split {
        kind,
        examples,
        fingerprints,
    })
}

/// Reads a dataset previously written by [`write_dataset`]. The stored data
/// config must equal the requested one.
pub fn read_dataset(cfg: &ExperimentConfig, root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.data != cfg.data {
        return Err(HarnessError::Config(format!(
            "{} was generated with a different data config",
            path.display()
        )));
    }
    let train = read_split(cfg, root, SplitKind::Train, &manifest.train)?;
    let test = read_split(cfg, root, SplitKind::Test, &manifest.test)?;
    check_disjoint(&train.fingerprints, &test.fingerprints)?;
    Ok(Dataset { train, test })
}

/// Uses `root` when it holds a dataset for this config, otherwise generates
/// the splits in memory.
pub fn load_or_generate(cfg: &ExperimentConfig, root: &Path) -> Result<Dataset> {
    if root.join(MANIFEST).exists() {
        let text = fs::read_to_string(root.join(MANIFEST))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.data == cfg.data {
            return read_dataset(cfg, root);
        }
    }
    generate(cfg)
}
