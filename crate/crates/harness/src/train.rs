//! Training runs: variants, the unbiasedness penalty, checkpoints and the
//! on-disk run cache shared by every experiment.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use m3esr_core::checkpoint;
use m3esr_core::fusion::{StaticWeights, TemperatureMode, STATIC_LOGITS};
use m3esr_core::model::{Example, Routing, SrModel};
use m3esr_core::numerics::{derive_seed, sigmoid, Adam, ParamSet, Rng, Tape, Tensor};
use m3esr_core::synth::Modality;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Split};
use crate::error::{HarnessError, Result};
use crate::eval::evaluate_split;
use crate::metrics::MetricsRow;

/// Bumped whenever training or evaluation changes what a run produces, so
/// stale cache entries are never reused.
const RUN_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One learned weight per modality, scheduled temperatures.
    Static,
    /// Uncertainty router with scheduled temperatures.
    DynamicTemp,
    /// Uncertainty router with `τ ≡ 1`.
    DynamicNoTemp,
    /// No guidance at all.
    NoModality,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Static,
        Variant::DynamicTemp,
        Variant::DynamicNoTemp,
        Variant::NoModality,
    ];

    /// Accepts the canonical labels and the ablation-table aliases.
    pub fn parse(name: &str) -> Result<Variant> {
        Ok(match name {
            "static" | "temperature-only" => Variant::Static,
            "dynamic" | "dynamic+temp" | "both" => Variant::DynamicTemp,
            "dynamic-no-temp" | "routing-only" => Variant::DynamicNoTemp,
            "no-modality" | "none" => Variant::NoModality,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown variant '{other}' (expected static, dynamic, dynamic+temp, dynamic-no-temp or no-modality)"
                )))
            }
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Static => "static",
            Variant::DynamicTemp => "dynamic+temp",
            Variant::DynamicNoTemp => "dynamic-no-temp",
            Variant::NoModality => "no-modality",
        }
    }

    pub fn routing(self) -> Routing {
        match self {
            Variant::Static => Routing::Static,
            Variant::DynamicTemp | Variant::DynamicNoTemp => Routing::Dynamic,
            Variant::NoModality => Routing::Off,
        }
    }

    pub fn temperature(self) -> TemperatureMode {
        match self {
            Variant::DynamicNoTemp => TemperatureMode::Fixed,
            _ => TemperatureMode::Scheduled,
        }
    }

    pub fn is_dynamic(self) -> bool {
        self.routing() == Routing::Dynamic
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One training job.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    /// Modalities seen by the model; empty for [`Variant::NoModality`].
    pub modalities: Vec<Modality>,
    pub seed: u64,
    /// Reference weights for the unbiasedness penalty of dynamic variants.
    pub wbar: Option<Vec<f64>>,
}

impl RunSpec {
    pub fn new(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> RunSpec {
        let modalities = match variant {
            Variant::NoModality => Vec::new(),
            _ => cfg.data.modalities.clone(),
        };
        RunSpec {
            variant,
            modalities,
            seed,
            wbar: None,
        }
    }

    pub fn model(&self, cfg: &ExperimentConfig) -> Result<SrModel> {
        let spec = cfg.spec(self.variant.routing(), &self.modalities, self.variant.temperature())?;
        Ok(SrModel::new(spec)?)
    }

    /// Short human-readable run name.
    pub fn name(&self) -> String {
        let mods: Vec<&str> = self.modalities.iter().map(|m| m.name()).collect();
        let mods = if mods.is_empty() { "none".to_string() } else { mods.join("+") };
        format!("{}_{}_s{}", self.variant.label().replace('+', "-"), mods, self.seed)
    }

    /// Cache key over everything that determines the trained parameters and
    /// the reported metrics.
    pub fn key(&self, cfg: &ExperimentConfig) -> String {
        let mut h = Sha256::new();
        h.update(RUN_FORMAT.to_le_bytes());
        for part in [
            serde_json::to_string(&cfg.data),
            serde_json::to_string(&cfg.model),
            serde_json::to_string(&cfg.train),
        ] {
            h.update(part.expect("config serializes").as_bytes());
        }
        h.update(self.name().as_bytes());
        if let Some(w) = &self.wbar {
            for v in w {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-modality `w̄` of a trained static model, restricted to `keep`.
pub fn static_wbar(static_params: &ParamSet, static_modalities: &[Modality], keep: &[Modality]) -> Result<Vec<f64>> {
    let logits = static_params.get(STATIC_LOGITS)?;
    keep.iter()
        .map(|m| {
            let k = static_modalities.iter().position(|s| s == m).ok_or_else(|| {
                HarnessError::Config(format!("static reference has no weight for {m}"))
            })?;
            Ok(sigmoid(logits.data()[k]))
        })
        .collect()
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub run: RunSpec,
    pub model: SrModel,
    pub params: ParamSet,
    pub metrics: MetricsRow,
    /// Mean training loss of each step's batch, including the penalty.
    pub losses: Vec<f64>,
}

impl TrainedRun {
    /// The `w̄` to compare this model's routing with: its own weights for
    /// static models, the penalty reference for dynamic ones.
    pub fn wbar(&self) -> Result<Option<StaticWeights>> {
        Ok(match self.run.variant.routing() {
            Routing::Static => Some(self.model.spec.fusion.static_weights(&self.params)?),
            Routing::Dynamic => self.run.wbar.as_ref().map(|w| StaticWeights {
                values: Tensor::new(vec![w.len()], w.clone()).expect("nonempty w̄"),
            }),
            Routing::Off => None,
        })
    }
}

/// Examples with the bundle restricted to the run's modalities.
pub fn restrict(examples: &[Example], modalities: &[Modality]) -> Result<Vec<Example>> {
    examples
        .par_iter()
        .map(|e| Ok(e.with_modalities(modalities)?))
        .collect()
}

fn check_midpoint(model: &SrModel, params: &ParamSet) -> Result<()> {
    if model.spec.routing == Routing::Off || model.spec.fusion.temperature == TemperatureMode::Fixed {
        return Ok(());
    }
    for &m in &model.spec.fusion.modalities {
        let t = model.spec.fusion.temperature(params, m, 0.5)?;
        if (t.pre_clamp - 0.5).abs() > 1e-12 {
            return Err(m3esr_core::Error::Contract(format!(
                "temperature midpoint of {m} drifted to {}",
                t.pre_clamp
            ))
            .into());
        }
    }
    Ok(())
}

struct SampleTape {
    tape: Tape,
    loss: m3esr_core::numerics::Var,
    weights: Option<m3esr_core::numerics::Var>,
}

/// One optimizer step's gradient: mean MSE over the batch plus
/// `λ Σ_m (mean_{b,i} w_{b,i}^m − w̄_m)²` for dynamic models.
fn batch_gradient(
    model: &SrModel,
    params: &ParamSet,
    batch: &[&Example],
    noise_seeds: &[u64],
    penalty: Option<(f64, &[f64])>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let b = batch.len() as f64;
    let mut tapes: Vec<SampleTape> = batch
        .par_iter()
        .zip(noise_seeds)
        .map(|(ex, &s)| {
            let mut tape = Tape::new();
            let (trace, loss) = model.loss_tape(&mut tape, params, ex, &mut Rng::new(s))?;
            let loss = tape.scale(loss, 1.0 / b);
            Ok(SampleTape {
                tape,
                loss,
                weights: trace.weights,
            })
        })
        .collect::<Result<_>>()?;
    let mut total: f64 = tapes.iter().map(|t| t.tape.value(t.loss).item()).sum();

    if let Some((lambda, wbar)) = penalty {
        let m = wbar.len();
        let np = model.spec.n_patches();
        let mut mean = vec![0.0; m];
        for t in &tapes {
            let w = t.tape.value(t.weights.expect("dynamic model records weights"));
            for (k, acc) in mean.iter_mut().enumerate() {
                *acc += w.row(k).iter().sum::<f64>() / (b * np as f64);
            }
        }
        total += lambda * mean.iter().zip(wbar).map(|(a, w)| (a - w).powi(2)).sum::<f64>();
        // d/dw_{b,i}^m of the penalty is constant across the batch
        let coef: Vec<f64> = mean
            .iter()
            .zip(wbar)
            .map(|(a, w)| 2.0 * lambda * (a - w) / (b * np as f64))
            .collect();
        let c = Tensor::from_fn(&[m, np], |j| coef[j / np]);
        for t in &mut tapes {
            let cv = t.tape.constant(c.clone());
            let pw = t.tape.mul(t.weights.expect("dynamic model records weights"), cv)?;
            let pen = t.tape.sum(pw);
            t.loss = t.tape.add(t.loss, pen)?;
        }
    }

    let grads: Vec<BTreeMap<String, Tensor>> = tapes
        .par_iter()
        .map(|t| Ok(t.tape.backward(t.loss)?.named()))
        .collect::<Result<_>>()?;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for g in grads {
        for (name, t) in g {
            match acc.get_mut(&name) {
                Some(a) => *a = a.add(&t)?,
                None => {
                    acc.insert(name, t);
                }
            }
        }
    }
    Ok((total, acc))
}

/// Trains `run` on `data.train` and evaluates on both splits. The batch
/// order depends only on the seed, so repeated calls are bit-identical.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, run: &RunSpec, experiment: &str) -> Result<TrainedRun> {
    let start = Instant::now();
    let model = run.model(cfg)?;
    if run.variant.is_dynamic() {
        match &run.wbar {
            Some(w) if w.len() == run.modalities.len() => {}
            Some(w) => {
                return Err(HarnessError::Config(format!(
                    "{} reference weights for {} modalities",
                    w.len(),
                    run.modalities.len()
                )))
            }
            None if cfg.train.lambda_ub == 0.0 => {}
            None => return Err(HarnessError::Config("dynamic runs need static reference weights".into())),
        }
    }
    let train_ex = restrict(&data.train.examples, &run.modalities)?;
    let mut params = model.init(run.seed);
    let mut opt = Adam::new(cfg.train.adam);
    let mut rng = Rng::derive(run.seed, 0xba7c);
    let n = train_ex.len();
    let bsz = cfg.train.batch.min(n);
    let steps_per_epoch = n.div_ceil(bsz);
    let penalty = match (&run.wbar, run.variant.is_dynamic()) {
        (Some(w), true) if cfg.train.lambda_ub > 0.0 => Some((cfg.train.lambda_ub, w.as_slice())),
        _ => None,
    };
    let mut losses = Vec::with_capacity(cfg.train.steps);
    check_midpoint(&model, &params)?;
    for step in 0..cfg.train.steps {
        let batch: Vec<&Example> = (0..bsz).map(|_| &train_ex[rng.below(n)]).collect();
        let noise: Vec<u64> = (0..bsz)
            .map(|j| derive_seed(derive_seed(run.seed, step as u64), j as u64))
            .collect();
        let (loss, grads) = batch_gradient(&model, &params, &batch, &noise, penalty)?;
        if !loss.is_finite() {
            return Err(m3esr_core::Error::Domain(format!("training loss diverged at step {step}")).into());
        }
        opt.step(&mut params, &grads)?;
        losses.push(loss);
        if (step + 1) % steps_per_epoch == 0 {
            check_midpoint(&model, &params)?;
        }
    }
    check_midpoint(&model, &params)?;
    let mut trained = TrainedRun {
        run: run.clone(),
        model,
        params,
        metrics: MetricsRow {
            experiment: experiment.to_string(),
            variant: run.variant.label().to_string(),
            seed: run.seed,
            train_mse: None,
            heldout_mse: 0.0,
            psnr: 0.0,
            ssim: 0.0,
            gamma: None,
            seconds: 0.0,
        },
        losses,
    };
    trained.metrics = evaluate_run(cfg, &trained, &data.train, &data.test, experiment)?;
    trained.metrics.seconds = start.elapsed().as_secs_f64();
    Ok(trained)
}

/// Held-out metrics of a trained run, with the train-split MSE for the gap.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    run: &TrainedRun,
    train: &Split,
    test: &Split,
    experiment: &str,
) -> Result<MetricsRow> {
    let wbar = run.wbar()?;
    let noise = cfg.model.noise_scale;
    let train_eval = evaluate_split(&run.model, &run.params, train, &run.run.modalities, None, run.run.seed, noise)?;
    let test_eval = evaluate_split(&run.model, &run.params, test, &run.run.modalities, wbar.as_ref(), run.run.seed, noise)?;
    Ok(MetricsRow {
        experiment: experiment.to_string(),
        variant: run.run.variant.label().to_string(),
        seed: run.run.seed,
        train_mse: Some(train_eval.mse),
        heldout_mse: test_eval.mse,
        psnr: test_eval.psnr,
        ssim: test_eval.ssim,
        gamma: test_eval.gamma,
        seconds: 0.0,
    })
}

pub const CHECKPOINT: &str = "checkpoint.m3t";
pub const METRICS: &str = "metrics.json";
pub const LOSSES: &str = "loss.csv";

/// Metadata stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub variant: Variant,
    pub modalities: Vec<Modality>,
    pub seed: u64,
    pub wbar: Option<Vec<f64>>,
    pub config: ExperimentConfig,
    /// Fingerprints of the training split, for the contamination check.
    pub train_fingerprints: Vec<String>,
}

pub fn save_run(dir: &Path, cfg: &ExperimentConfig, data: &Dataset, run: &TrainedRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = RunMeta {
        variant: run.run.variant,
        modalities: run.run.modalities.clone(),
        seed: run.run.seed,
        wbar: run.run.wbar.clone(),
        config: cfg.clone(),
        train_fingerprints: data.train.fingerprints.clone(),
    };
    checkpoint::save(&dir.join(CHECKPOINT), &run.params, &serde_json::to_value(&meta)?)?;
    fs::write(dir.join(METRICS), serde_json::to_string_pretty(&run.metrics)? + "\n")?;
    let mut w = csv::Writer::from_path(dir.join(LOSSES))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in run.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_run`] and rebuilds its model.
pub fn load_checkpoint(path: &Path) -> Result<(SrModel, ParamSet, RunMeta)> {
    let (params, meta) = checkpoint::load(path)?;
    let meta: RunMeta = serde_json::from_value(meta).map_err(|e| {
        HarnessError::Config(format!("{} is not a training checkpoint: {e}", path.display()))
    })?;
    let run = RunSpec {
        variant: meta.variant,
        modalities: meta.modalities.clone(),
        seed: meta.seed,
        wbar: meta.wbar.clone(),
    };
    let model = run.model(&meta.config)?;
    Ok((model, params, meta))
}

/// Runs are memoized under `out/runs/<name>-<key>/`.
pub struct RunCache {
    pub root: PathBuf,
}

impl RunCache {
    pub fn new(out: &Path) -> RunCache {
        RunCache { root: out.join("runs") }
    }

    pub fn dir(&self, cfg: &ExperimentConfig, run: &RunSpec) -> PathBuf {
        self.root.join(format!("{}-{}", run.name(), run.key(cfg)))
    }

    fn load(&self, cfg: &ExperimentConfig, data: &Dataset, run: &RunSpec, experiment: &str) -> Result<Option<TrainedRun>> {
        let dir = self.dir(cfg, run);
        if !dir.join(METRICS).exists() || !dir.join(CHECKPOINT).exists() {
            return Ok(None);
        }
        let (model, params, meta) = load_checkpoint(&dir.join(CHECKPOINT))?;
        if meta.train_fingerprints != data.train.fingerprints {
            return Ok(None);
        }
        let mut metrics: MetricsRow = serde_json::from_str(&fs::read_to_string(dir.join(METRICS))?)?;
        metrics.experiment = experiment.to_string();
        let mut losses = Vec::new();
        let mut r = csv::Reader::from_path(dir.join(LOSSES))?;
        for rec in r.records() {
            let rec = rec?;
            losses.push(rec[1].parse::<f64>().map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))?);
        }
        Ok(Some(TrainedRun {
            run: run.clone(),
            model,
            params,
            metrics,
            losses,
        }))
    }

    /// Loads `run` from the cache or trains and stores it.
    pub fn get(&self, cfg: &ExperimentConfig, data: &Dataset, run: &RunSpec, experiment: &str) -> Result<TrainedRun> {
        if let Some(r) = self.load(cfg, data, run, experiment)? {
            return Ok(r);
        }
        let trained = train(cfg, data, run, experiment)?;
        save_run(&self.dir(cfg, run), cfg, data, &trained)?;
        Ok(trained)
    }

    /// The static run over all configured modalities for `seed`.
    pub fn static_reference(&self, cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<TrainedRun> {
        self.get(cfg, data, &RunSpec::new(cfg, Variant::Static, seed), "static-reference")
    }

    /// `variant` over `modalities`, training the static reference first
    /// when the variant needs `w̄`.
    pub fn run(
        &self,
        cfg: &ExperimentConfig,
        data: &Dataset,
        variant: Variant,
        modalities: &[Modality],
        seed: u64,
        experiment: &str,
    ) -> Result<TrainedRun> {
        let mut spec = RunSpec::new(cfg, variant, seed);
        if variant != Variant::NoModality {
            spec.modalities = modalities.to_vec();
        }
        if variant.is_dynamic() {
            let reference = self.static_reference(cfg, data, seed)?;
            spec.wbar = Some(static_wbar(&reference.params, &reference.run.modalities, &spec.modalities)?);
        }
        self.get(cfg, data, &spec, experiment)
    }
}

/// Metadata for inspection output.
pub fn describe(meta: &RunMeta) -> serde_json::Value {
    json!({
        "variant": meta.variant.label(),
        "modalities": meta.modalities.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "seed": meta.seed,
        "wbar": meta.wbar,
        "train_samples": meta.train_fingerprints.len(),
    })
}
