//! Experiment configuration. Every field has a default; the committed
//! `config/defaults.json` is exactly `ExperimentConfig::default()`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use m3esr_core::fusion::{FusionDims, FusionLayer, TemperatureMode};
use m3esr_core::model::{Mode, ModelSpec, Routing};
use m3esr_core::numerics::AdamConfig;
use m3esr_core::synth::{Modality, SynthConfig};
use m3esr_core::theory::RademacherBudget;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const DEFAULTS_JSON: &str = include_str!("../config/defaults.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the benchmark itself; training seeds do not change the data.
    pub seed: u64,
    pub synth: SynthConfig,
    pub modalities: Vec<Modality>,
    /// Token-transplant rate per modality, applied to both splits.
    pub corruption: BTreeMap<Modality, f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_test: 500,
            seed: 20_240_601,
            synth: SynthConfig::default(),
            modalities: Modality::ALL.to_vec(),
            corruption: BTreeMap::from([(Modality::Seg, 0.3)]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: FusionDims,
    pub mode: Mode,
    pub regression_t: f64,
    pub refine_steps: usize,
    /// Initial noise scale of the refinement sampler.
    pub noise_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: FusionDims::default(),
            mode: Mode::Regression,
            regression_t: 1.0,
            refine_steps: 10,
            noise_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Weight of the squared gap between batch-mean routed weights and `w̄`.
    pub lambda_ub: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch: 16,
            adam: AdamConfig::default(),
            lambda_ub: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Held-out samples used for covariances; 0 means the whole split.
    pub n_samples: usize,
    /// Held-out samples whose remainders are pooled for the slope fit.
    pub first_order_samples: usize,
    pub scales: Vec<f64>,
    pub delta: f64,
    /// Training samples over which the Rademacher proxy maximizes.
    pub rademacher_samples: usize,
    pub rademacher: RademacherBudget,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            n_samples: 0,
            first_order_samples: 8,
            scales: vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3],
            delta: 0.05,
            rademacher_samples: 16,
            rademacher: RademacherBudget {
                restarts: 4,
                steps: 500,
                adam: AdamConfig::default(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub theory: TheoryConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            theory: TheoryConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs"),
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.data.synth.validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return bad("both splits need at least one sample".into());
        }
        for (m, &r) in &self.data.corruption {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("corruption rate {r} for {m} outside [0,1]"));
            }
            if !self.data.modalities.contains(m) {
                return bad(format!("corruption configured for absent modality {m}"));
            }
        }
        let mut sorted = self.data.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.data.modalities {
            return bad("modalities must be distinct and in canonical order seg, depth, edge, feat".into());
        }
        if self.data.synth.token_dim != self.model.dims.token_dim {
            return bad(format!(
                "synth token_dim {} differs from model token_dim {}",
                self.data.synth.token_dim, self.model.dims.token_dim
            ));
        }
        if self.train.batch == 0 {
            return bad("batch size must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.theory.delta > 0.0 && self.theory.delta < 1.0) {
            return bad(format!("delta {} outside (0,1)", self.theory.delta));
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        self.spec(Routing::Dynamic, &self.data.modalities, TemperatureMode::Scheduled)?;
        Ok(())
    }

    /// Model spec for one variant over the given modality subset.
    pub fn spec(&self, routing: Routing, modalities: &[Modality], temperature: TemperatureMode) -> Result<ModelSpec> {
        let s = &self.data.synth;
        let spec = ModelSpec {
            hr_size: s.hr_size,
            channels: s.channels,
            scale: s.scale,
            patch: s.patch,
            fusion: FusionLayer::new(self.model.dims.clone(), modalities.to_vec(), temperature),
            routing,
            mode: self.model.mode,
            regression_t: self.model.regression_t,
            refine_steps: self.model.refine_steps,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Output directory, with `--out` taking precedence over the config.
pub fn out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.clone())
}
