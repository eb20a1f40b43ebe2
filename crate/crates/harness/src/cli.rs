//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use m3esr_core::checkpoint::{decode_checkpoint, INDEX_MAGIC};
use m3esr_core::model::Mode;
use m3esr_core::numerics::io::decode;
use m3esr_core::numerics::{derive_seed, ParamSet, Tensor};
use m3esr_core::synth::image::write_pgm;
use m3esr_core::synth::Modality;
use serde_json::json;

use crate::config::{out_dir, ExperimentConfig};
use crate::data::{load_or_generate, write_dataset, Dataset};
use crate::error::{HarnessError, Result};
use crate::eval::evaluate_checkpoint;
use crate::experiments::{exp_ablate_modality, exp_ablate_module, exp_svd, exp_theory};
use crate::train::{describe, load_checkpoint, RunCache, RunMeta, Variant, CHECKPOINT};

pub const THREADS_ENV: &str = "M3ESR_THREADS";
pub const DATA_DIR: &str = "data";
pub const EVAL_DIR: &str = "eval";

#[derive(Debug, Parser)]
#[command(name = "m3esr", version, about = "Multi-modal expert fusion laboratory")]
pub struct Cli {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; the M3ESR_THREADS variable takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write intermediate images during evaluation.
    #[arg(long, global = true)]
    pub dump_steps: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and held-out splits under <out>/data.
    GenData,
    /// Train one variant.
    Train {
        /// static, dynamic, dynamic+temp, dynamic-no-temp or no-modality.
        #[arg(long, default_value = "dynamic")]
        variant: String,
        /// Comma-separated subset of seg,depth,edge,feat.
        #[arg(long)]
        modalities: Option<String>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Static versus dynamic fusion.
    ExpSvd,
    /// Remove one modality at a time.
    ExpAblateModality,
    /// Routing and temperature scheduling on and off.
    ExpAblateModule,
    /// Covariance, first-order and complexity checks.
    ExpTheory,
    /// Print an M3T1 tensor or checkpoint as text.
    Inspect { path: PathBuf },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        cfg.threads = v
            .trim()
            .parse()
            .map_err(|_| HarnessError::Config(format!("{THREADS_ENV}={v} is not a thread count")))?;
    }
    cfg.out = out_dir(&cfg, cli.out.as_deref());
    cfg.validate()?;
    Ok(cfg)
}

fn install_threads(n: usize) {
    // the global pool can only be set once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_or_generate(cfg, &cfg.out.join(DATA_DIR))
}

fn parse_modalities(list: &str) -> Result<Vec<Modality>> {
    let mut mods = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            Modality::ALL
                .iter()
                .copied()
                .find(|m| m.name() == s.trim())
                .ok_or_else(|| HarnessError::Config(format!("unknown modality '{}'", s.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    mods.sort();
    mods.dedup();
    Ok(mods)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Command::Inspect { path } = &cli.command {
        print!("{}", inspect(path)?);
        return Ok(());
    }
    let cfg = load_config(cli)?;
    install_threads(cfg.threads);
    let out = cfg.out.clone();
    match &cli.command {
        Command::GenData => {
            let d = write_dataset(&cfg, &out.join(DATA_DIR))?;
            println!(
                "{}",
                json!({
                    "dir": out.join(DATA_DIR),
                    "train": d.train.len(),
                    "test": d.test.len(),
                    "train_digest": d.train.digest(),
                    "test_digest": d.test.digest(),
                })
            );
        }
        Command::Train { variant, modalities } => {
            let variant = Variant::parse(variant)?;
            let mods = match modalities {
                Some(list) => parse_modalities(list)?,
                None => cfg.data.modalities.clone(),
            };
            if let Some(m) = mods.iter().find(|m| !cfg.data.modalities.contains(m)) {
                return Err(HarnessError::Config(format!("modality {m} is not in the dataset")));
            }
            let data = dataset(&cfg)?;
            let cache = RunCache::new(&out);
            for &seed in &cfg.seeds {
                let r = cache.run(&cfg, &data, variant, &mods, seed, "train")?;
                println!(
                    "{}",
                    json!({
                        "checkpoint": cache.dir(&cfg, &r.run).join(CHECKPOINT),
                        "metrics": r.metrics,
                    })
                );
            }
        }
        Command::Eval { checkpoint } => {
            let data = dataset(&cfg)?;
            let row = evaluate_checkpoint(checkpoint, &data.train, &data.test, "eval")?;
            let dir = out.join(EVAL_DIR);
            fs::create_dir_all(&dir)?;
            let text = serde_json::to_string_pretty(&row)? + "\n";
            fs::write(dir.join("metrics.json"), &text)?;
            print!("{text}");
            if cli.dump_steps {
                dump_steps(checkpoint, &data, &dir.join("steps"), cfg.model.noise_scale)?;
            }
        }
        Command::ExpSvd => {
            let o = exp_svd(&cfg, &dataset(&cfg)?, &out)?;
            println!("{}", o.dir.display());
        }
        Command::ExpAblateModality => {
            let o = exp_ablate_modality(&cfg, &dataset(&cfg)?, &out)?;
            println!("{}", o.dir.display());
        }
        Command::ExpAblateModule => {
            let o = exp_ablate_module(&cfg, &dataset(&cfg)?, &out)?;
            println!("{}", o.dir.display());
        }
        Command::ExpTheory => {
            exp_theory(&cfg, &dataset(&cfg)?, &out)?;
            println!("{}", out.join(crate::experiments::THEORY).display());
        }
        Command::Inspect { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// PGM images of the first held-out sample: each refinement step's
/// estimate, or the single regression output.
fn dump_steps(checkpoint: &Path, data: &Dataset, dir: &Path, noise_scale: f64) -> Result<()> {
    let (model, params, meta) = load_checkpoint(checkpoint)?;
    let Some(first) = data.test.examples.first() else {
        return Ok(());
    };
    let ex = first.with_modalities(&meta.modalities)?;
    fs::create_dir_all(dir)?;
    write_pgm(&dir.join("lr.pgm"), &ex.lr)?;
    write_pgm(&dir.join("hr.pgm"), &ex.hr)?;
    match model.spec.mode {
        Mode::Regression => write_pgm(&dir.join("output.pgm"), &model.predict(&params, &ex)?)?,
        Mode::Refinement => {
            let mut dump = |k: usize, img: &Tensor| write_pgm(&dir.join(format!("step_{k:03}.pgm")), img);
            let out = model.refine(&params, &ex, derive_seed(meta.seed, 0), noise_scale, Some(&mut dump))?;
            write_pgm(&dir.join("output.pgm"), &out.image)?;
        }
    }
    Ok(())
}

fn tensor_text(name: &str, t: &Tensor) -> String {
    let mut s = format!("{name} shape {:?}\n", t.shape());
    for v in t.data() {
        s.push_str(&format!("{v}\n"));
    }
    s
}

fn params_text(params: &ParamSet) -> String {
    params.iter().map(|(n, t)| tensor_text(n, t)).collect()
}

/// Text dump of an M3T1 tensor, or of every parameter of a checkpoint.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    if bytes.ends_with(INDEX_MAGIC) {
        let (params, meta) = decode_checkpoint(&bytes)?;
        let header = match serde_json::from_value::<RunMeta>(meta.clone()) {
            Ok(m) => describe(&m),
            Err(_) => meta,
        };
        return Ok(format!(
            "checkpoint {}\nmeta {}\nparameters {} ({} values)\n{}",
            path.display(),
            header,
            params.len(),
            params.scalar_count(),
            params_text(&params)
        ));
    }
    let t = decode(&bytes)?;
    Ok(tensor_text(&format!("tensor {}", path.display()), &t))
}
