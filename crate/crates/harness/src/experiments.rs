//! The four preset experiments. Each writes `results.csv` and `report.json`
//! under `out/<experiment>/`; wall-clock times go to `timing.csv` so the
//! other two files are reproducible byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use m3esr_core::model::Example;
use m3esr_core::synth::Modality;
use m3esr_core::theory::{
    bound_report, first_order_check, model_rademacher, moe_start_from_static, pooled_first_order, weight_norm,
    BoundInputs, FirstOrderCheck, TheoryReport,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{routing_stats, RoutingStats};
use crate::metrics::MetricsRow;
use crate::train::{restrict, RunCache, TrainedRun, Variant};

pub const SVD: &str = "exp-svd";
pub const ABLATE_MODALITY: &str = "exp-ablate-modality";
pub const ABLATE_MODULE: &str = "exp-ablate-module";
pub const THEORY: &str = "exp-theory";

pub const RESULTS: &str = "results.csv";
pub const REPORT: &str = "report.json";
pub const TIMING: &str = "timing.csv";

/// One CSV line: a table row label plus the run's metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub row: String,
    pub metrics: MetricsRow,
}

const HEADER: [&str; 10] = [
    "experiment",
    "row",
    "variant",
    "seed",
    "train_mse",
    "heldout_mse",
    "gap",
    "psnr",
    "ssim",
    "gamma",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            m.experiment.clone(),
            r.row.clone(),
            m.variant.clone(),
            m.seed.to_string(),
            opt(m.train_mse),
            m.heldout_mse.to_string(),
            opt(m.gap()),
            m.psnr.to_string(),
            m.ssim.to_string(),
            opt(m.gamma),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_timing(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "seed", "seconds"])?;
    for r in rows {
        w.write_record([r.row.clone(), r.metrics.seed.to_string(), format!("{:.3}", r.metrics.seconds)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn finish(dir: &Path, rows: &[ResultRow], report: &Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_results(&dir.join(RESULTS), rows)?;
    write_timing(&dir.join(TIMING), rows)?;
    write_json(&dir.join(REPORT), report)
}

fn row(label: &str, experiment: &str, run: &TrainedRun) -> ResultRow {
    let mut metrics = run.metrics.clone();
    metrics.experiment = experiment.to_string();
    ResultRow {
        row: label.to_string(),
        metrics,
    }
}

fn metrics_json(m: &MetricsRow) -> Value {
    json!({
        "train_mse": m.train_mse,
        "heldout_mse": m.heldout_mse,
        "gap": m.gap(),
        "psnr": m.psnr,
        "ssim": m.ssim,
        "gamma": m.gamma,
    })
}

/// One-sided sign-test p-value `P(X ≥ wins)` for `X ~ Bin(n, ½)`.
pub fn sign_test(wins: usize, n: usize) -> f64 {
    let mut c = 1.0;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            total += c;
        }
    }
    total / 2f64.powi(n as i32)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Routing statistics of a trained run over the held-out split, or over its
/// first `n` samples when `n > 0`.
pub fn heldout_routing(data: &Dataset, run: &TrainedRun, n: usize) -> Result<Option<RoutingStats>> {
    let Some(wbar) = run.wbar()? else {
        return Ok(None);
    };
    let n = if n == 0 { data.test.len() } else { n.min(data.test.len()) };
    let examples = restrict(&data.test.examples[..n], &run.run.modalities)?;
    Ok(Some(routing_stats(&run.model, &run.params, &examples, &wbar)?))
}

fn named(modalities: &[Modality], values: &[f64]) -> BTreeMap<String, f64> {
    modalities.iter().zip(values).map(|(m, v)| (m.name().to_string(), *v)).collect()
}

#[derive(Clone, Debug)]
pub struct SvdSeed {
    pub seed: u64,
    pub static_run: TrainedRun,
    pub dynamic_run: TrainedRun,
    /// Per-modality mean `Cov(w, Δ)` of the dynamic model on held-out data.
    pub mean_cov: Vec<f64>,
}

impl SvdSeed {
    pub fn dynamic_wins(&self) -> bool {
        self.dynamic_run.metrics.heldout_mse < self.static_run.metrics.heldout_mse
    }

    pub fn gamma(&self) -> f64 {
        self.dynamic_run.metrics.gamma.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct SvdOutcome {
    pub seeds: Vec<SvdSeed>,
    pub modalities: Vec<Modality>,
    pub dir: PathBuf,
}

/// Static versus dynamic fusion over every configured seed.
pub fn exp_svd(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<SvdOutcome> {
    let cache = RunCache::new(out);
    let mods = cfg.data.modalities.clone();
    let mut seeds = Vec::new();
    let mut rows = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let s = cache.run(cfg, data, Variant::Static, &mods, seed, SVD)?;
        let d = cache.run(cfg, data, Variant::DynamicTemp, &mods, seed, SVD)?;
        let stats = heldout_routing(data, &d, cfg.theory.n_samples)?.expect("dynamic run has w̄");
        rows.push(row("static", SVD, &s));
        rows.push(row("dynamic", SVD, &d));
        let entry = SvdSeed {
            seed,
            mean_cov: stats.mean_cov(),
            static_run: s,
            dynamic_run: d,
        };
        per_seed.push(json!({
            "seed": seed,
            "static": metrics_json(&entry.static_run.metrics),
            "dynamic": metrics_json(&entry.dynamic_run.metrics),
            "dynamic_wins": entry.dynamic_wins(),
            "mean_cov": named(&mods, &entry.mean_cov),
        }));
        seeds.push(entry);
    }
    let mut report = json!({
        "experiment": SVD,
        "modalities": mods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "corruption": &cfg.data.corruption,
        "per_seed": per_seed,
    });
    if seeds.len() > 1 {
        let wins = seeds.iter().filter(|s| s.dynamic_wins()).count();
        report["aggregate"] = json!({
            "seeds": seeds.len(),
            "dynamic_wins": wins,
            "gamma_positive": seeds.iter().filter(|s| s.gamma() > 0.0).count(),
            "mean_heldout_static": mean(seeds.iter().map(|s| s.static_run.metrics.heldout_mse)),
            "mean_heldout_dynamic": mean(seeds.iter().map(|s| s.dynamic_run.metrics.heldout_mse)),
            "mean_gamma": mean(seeds.iter().map(SvdSeed::gamma)),
            "sign_test_p": sign_test(wins, seeds.len()),
        });
    }
    let dir = out.join(SVD);
    finish(&dir, &rows, &report)?;
    Ok(SvdOutcome {
        seeds,
        modalities: mods,
        dir,
    })
}

/// Held-out MSE of one table row for every seed, in seed order.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub heldout: Vec<f64>,
}

impl TableRow {
    pub fn mean(&self) -> f64 {
        mean(self.heldout.iter().copied())
    }
}

#[derive(Clone, Debug)]
pub struct TableOutcome {
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
    pub dir: PathBuf,
}

impl TableOutcome {
    pub fn get(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn table(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out: &Path,
    experiment: &str,
    plan: &[(String, Variant, Vec<Modality>)],
    extra: impl FnOnce(&TableOutcome) -> Value,
) -> Result<TableOutcome> {
    let cache = RunCache::new(out);
    let mut rows = Vec::new();
    let mut table: Vec<TableRow> = plan
        .iter()
        .map(|(label, _, _)| TableRow {
            label: label.clone(),
            heldout: Vec::new(),
        })
        .collect();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let mut entry = serde_json::Map::new();
        for (k, (label, variant, mods)) in plan.iter().enumerate() {
            let r = cache.run(cfg, data, *variant, mods, seed, experiment)?;
            table[k].heldout.push(r.metrics.heldout_mse);
            entry.insert(label.clone(), metrics_json(&r.metrics));
            rows.push(row(label, experiment, &r));
        }
        per_seed.push(json!({ "seed": seed, "rows": entry }));
    }
    let outcome = TableOutcome {
        seeds: cfg.seeds.clone(),
        rows: table,
        dir: out.join(experiment),
    };
    let mut report = json!({
        "experiment": experiment,
        "rows": plan.iter().map(|p| p.0.clone()).collect::<Vec<_>>(),
        "per_seed": per_seed,
        "mean_heldout": outcome.rows.iter().map(|r| (r.label.clone(), r.mean())).collect::<BTreeMap<_, _>>(),
    });
    if cfg.seeds.len() > 1 {
        report["aggregate"] = extra(&outcome);
    }
    finish(&outcome.dir, &rows, &report)?;
    Ok(outcome)
}

pub const ROW_NONE: &str = "none";
pub const ROW_ALL: &str = "all";

pub fn without_label(m: Modality) -> String {
    format!("w/o {m}")
}

/// Dynamic fusion with no modality, each single modality removed, and all
/// modalities.
pub fn exp_ablate_modality(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<TableOutcome> {
    let all = cfg.data.modalities.clone();
    let mut plan = vec![(ROW_NONE.to_string(), Variant::NoModality, Vec::new())];
    for &m in &all {
        let keep: Vec<Modality> = all.iter().copied().filter(|&k| k != m).collect();
        let variant = if keep.is_empty() { Variant::NoModality } else { Variant::DynamicTemp };
        plan.push((without_label(m), variant, keep));
    }
    plan.push((ROW_ALL.to_string(), Variant::DynamicTemp, all));
    table(cfg, data, out, ABLATE_MODALITY, &plan, |t| {
        let none = t.get(ROW_NONE).expect("none row");
        let all = t.get(ROW_ALL).expect("all row");
        let n = t.seeds.len();
        let none_worst = (0..n)
            .filter(|&s| t.rows.iter().all(|r| r.label == ROW_NONE || r.heldout[s] < none.heldout[s]))
            .count();
        let all_not_worse = (0..n).filter(|&s| all.heldout[s] <= none.heldout[s]).count();
        json!({
            "seeds": n,
            "none_worst": none_worst,
            "all_not_worse_than_none": all_not_worse,
            "sign_test_p": sign_test(none_worst, n),
        })
    })
}

pub const ROW_ROUTING: &str = "routing-only";
pub const ROW_TEMPERATURE: &str = "temperature-only";
pub const ROW_BOTH: &str = "both";

/// Routing only, temperature only, and both.
pub fn exp_ablate_module(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<TableOutcome> {
    let all = cfg.data.modalities.clone();
    let plan: Vec<(String, Variant, Vec<Modality>)> = [ROW_ROUTING, ROW_TEMPERATURE, ROW_BOTH]
        .iter()
        .map(|&l| Ok((l.to_string(), Variant::parse(l)?, all.clone())))
        .collect::<Result<_>>()?;
    table(cfg, data, out, ABLATE_MODULE, &plan, |t| {
        let best = t
            .rows
            .iter()
            .min_by(|a, b| a.mean().total_cmp(&b.mean()))
            .expect("three rows");
        let n = t.seeds.len();
        let both = t.get(ROW_BOTH).expect("both row");
        let both_best = (0..n)
            .filter(|&s| t.rows.iter().all(|r| r.label == ROW_BOTH || both.heldout[s] < r.heldout[s]))
            .count();
        json!({
            "seeds": n,
            "best_mean": best.label,
            "both_best_per_seed": both_best,
        })
    })
}

/// First-order check of a trained dynamic run, pooled over the first
/// `cfg.theory.first_order_samples` held-out samples.
pub fn first_order(cfg: &ExperimentConfig, data: &Dataset, run: &TrainedRun) -> Result<FirstOrderCheck> {
    let wbar = run.wbar()?.ok_or_else(|| {
        m3esr_core::Error::Contract("first-order check needs a model with experts".into())
    })?;
    let n = cfg.theory.first_order_samples.clamp(1, data.test.len());
    let examples = restrict(&data.test.examples[..n], &run.run.modalities)?;
    let checks = examples
        .iter()
        .map(|ex| Ok(first_order_check(&run.model, &run.params, ex, &wbar, &cfg.theory.scales)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(pooled_first_order(&checks)?)
}

fn rademacher_examples(cfg: &ExperimentConfig, data: &Dataset, modalities: &[Modality]) -> Result<Vec<Example>> {
    let n = cfg.theory.rademacher_samples.clamp(1, data.train.len());
    restrict(&data.train.examples[..n], modalities)
}

/// Full theory report for one seed's static and dynamic pair.
pub fn theory_report(cfg: &ExperimentConfig, data: &Dataset, s: &TrainedRun, d: &TrainedRun) -> Result<TheoryReport> {
    let stats = heldout_routing(data, d, cfg.theory.n_samples)?.expect("dynamic run has w̄");
    let fo = first_order(cfg, data, d)?;
    let ex = rademacher_examples(cfg, data, &d.run.modalities)?;
    let seed = d.run.seed;
    let proxy_static = vec![
        model_rademacher(&s.model, &s.params, &ex, &cfg.theory.rademacher, seed)?,
        weight_norm(&s.params),
    ];
    let start = moe_start_from_static(&d.model, &s.params, seed)?;
    let proxy_moe = vec![
        model_rademacher(&d.model, &start, &ex, &cfg.theory.rademacher, seed)?,
        weight_norm(&d.params),
    ];
    let n = if cfg.theory.n_samples == 0 {
        data.test.len()
    } else {
        cfg.theory.n_samples.min(data.test.len())
    };
    Ok(bound_report(BoundInputs {
        modalities: d.run.modalities.iter().map(|m| m.name().to_string()).collect(),
        gamma: stats.gamma,
        cov: stats.cov.clone(),
        identity: stats.identity.clone(),
        first_order: fo,
        proxy_moe,
        proxy_static,
        static_risk: s.metrics.heldout_mse,
        moe_risk: d.metrics.heldout_mse,
        gap_static: s.metrics.gap().unwrap_or(f64::NAN),
        gap_moe: d.metrics.gap().unwrap_or(f64::NAN),
        loss_difference: stats.loss_difference,
        first_order_prediction: stats.first_order_prediction,
        n_samples: n,
        delta: cfg.theory.delta,
    })?)
}

pub const THEORY_REPORT: &str = "theory_report.json";
pub const COV_CSV: &str = "cov.csv";

pub fn write_cov(path: &Path, report: &TheoryReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["modality", "patch", "cov"])?;
    for (m, row) in report.modalities.iter().zip(&report.cov) {
        for (i, c) in row.iter().enumerate() {
            w.write_record([m.clone(), i.to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Theory checks on the trained static and dynamic models of every seed.
pub fn exp_theory(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<Vec<(u64, TheoryReport)>> {
    let cache = RunCache::new(out);
    let mods = cfg.data.modalities.clone();
    let dir = out.join(THEORY);
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let s = cache.run(cfg, data, Variant::Static, &mods, seed, THEORY)?;
        let d = cache.run(cfg, data, Variant::DynamicTemp, &mods, seed, THEORY)?;
        let report = theory_report(cfg, data, &s, &d)?;
        let seed_dir = dir.join(format!("seed_{seed}"));
        fs::create_dir_all(&seed_dir)?;
        write_json(&seed_dir.join(THEORY_REPORT), &report)?;
        write_cov(&seed_dir.join(COV_CSV), &report)?;
        rows.push(row("static", THEORY, &s));
        rows.push(row("dynamic", THEORY, &d));
        per_seed.push(json!({
            "seed": seed,
            "gamma": report.gamma,
            "mean_cov": named(&mods, &report.mean_cov),
            "identity_residual": report.identity_residual,
            "first_order_slope": report.first_order_slope,
            "bound_rhs": report.bound_rhs,
            "moe_risk": report.moe_risk,
            "static_risk": report.static_risk,
        }));
        reports.push((seed, report));
    }
    let report = json!({ "experiment": THEORY, "per_seed": per_seed });
    finish(&dir, &rows, &report)?;
    Ok(reports)
}
