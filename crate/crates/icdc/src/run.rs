//! Run directories: manifest, metrics log and the training driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use icdc_core::model::IcdcModel;
use icdc_core::problems::generate;
use icdc_core::training::{InstanceSource, IterationReport, Trainer};
use icdc_core::{rng_from_seed, Instance};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::save_model;
use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::eval::{best_of_n, exact_reference, mean_gap_pct, EvalOptions};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Hex SHA-256 of the config bytes, empty when the command has none.
    pub config_sha256: String,
    pub seeds: Vec<(String, u64)>,
    pub code_version: String,
}

impl Manifest {
    pub fn new(command: &str, config: Option<&[u8]>, seeds: Vec<(String, u64)>) -> Self {
        Self {
            command: command.into(),
            config_sha256: config.map(sha256_hex).unwrap_or_default(),
            seeds,
            code_version: CODE_VERSION.into(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").at(&path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn create_run_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)
}

/// One row of `metrics.csv`. Training rows leave `gap_pct` empty, eval rows
/// leave the loss columns empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: String,
    pub loss_vb: Option<f64>,
    pub loss_prd: Option<f64>,
    pub loss_cst: Option<f64>,
    pub mean_reward: Option<f64>,
    pub feasible_rate: Option<f64>,
    pub buffer_len: Option<usize>,
    pub rejected: Option<usize>,
    pub gap_pct: Option<f64>,
    pub wallclock: f64,
}

impl MetricsRow {
    pub fn train(r: &IterationReport, rejected: usize, wallclock: f64) -> Self {
        Self {
            step: r.iteration,
            phase: "train".into(),
            loss_vb: Some(r.cloning.vb),
            loss_prd: Some(r.cloning.prd),
            loss_cst: Some(r.cloning.cst),
            mean_reward: Some(r.improvement.mean_reward),
            feasible_rate: Some(r.improvement.feasible_rate),
            buffer_len: Some(r.improvement.buffer_len),
            rejected: Some(rejected),
            gap_pct: None,
            wallclock,
        }
    }

    pub fn eval(step: usize, gap_pct: f64, wallclock: f64) -> Self {
        Self { step, phase: "eval".into(), gap_pct: Some(gap_pct), wallclock, ..Self::default() }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Held-out instances with exact optima, evaluated during training.
pub struct EvalSet {
    pub instances: Vec<Instance>,
    pub optima: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl EvalSet {
    pub fn generate(cfg: &RunConfig, workers: usize) -> Result<Self> {
        let sched = cfg.run_schedule();
        let (family, size) = (cfg.family()?, cfg.instance_size()?);
        let instances = (0..sched.eval_instances as u64)
            .map(|i| generate(family, size, sched.eval_seed + i))
            .collect::<icdc_core::Result<Vec<_>>>()?;
        let optima: Vec<Option<f64>> = pool(workers)?.install(|| instances.par_iter().map(exact_reference).collect());
        let optima = optima
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Schema("eval instances are beyond the exact oracles".into()))?;
        Ok(Self { instances, optima, samples: sched.eval_samples, seed: sched.eval_seed })
    }

    /// Mean best-of-n gap in percent.
    pub fn gap(&self, model: &IcdcModel, workers: usize) -> Result<f64> {
        let opts = EvalOptions { samples: self.samples, seed: self.seed, ..EvalOptions::default() };
        let objs: Vec<Result<f64>> = pool(workers)?.install(|| {
            self.instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| Ok(icdc_core::problems::objective(inst, &best_of_n(model, inst, i, &opts)?)))
                .collect()
        });
        Ok(mean_gap_pct(&objs.into_iter().collect::<Result<Vec<_>>>()?, &self.optima))
    }
}

pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Schema(format!("worker pool: {e}")))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: IcdcModel,
    pub dir: PathBuf,
    pub iterations: usize,
    /// `(iteration, gap %)` for every eval row written.
    pub gaps: Vec<(usize, f64)>,
}

/// Trains per `config_path` into `out`: `config.json`, `manifest.json`,
/// `metrics.csv`, `checkpoint-<it>.json` every `checkpoint_every` iterations
/// and `checkpoint.json` at the end.
pub fn train_run(config_path: &Path, out: &Path, workers: usize) -> Result<TrainOutcome> {
    let raw = fs::read(config_path).at(config_path)?;
    let cfg = RunConfig::load(config_path)?;
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let sched = cfg.run_schedule();
    create_run_dir(out)?;
    let copy = out.join("config.json");
    fs::write(&copy, &raw).at(&copy)?;
    Manifest::new(
        "train",
        Some(&raw),
        vec![("train".into(), train_cfg.seed), ("eval".into(), sched.eval_seed)],
    )
    .write(out)?;

    let model = IcdcModel::init(model_cfg, &mut rng_from_seed(train_cfg.seed))?;
    let eval_set = if sched.eval_every > 0 { Some(EvalSet::generate(&cfg, workers)?) } else { None };
    let metrics_path = out.join("metrics.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    let mut trainer = Trainer::new(model, train_cfg, InstanceSource::Generate)?;
    let start = Instant::now();
    let mut gaps = Vec::new();
    let mut failure: Option<Error> = None;
    let mut step = |r: &IterationReport, t: &Trainer| -> Result<bool> {
        metrics.serialize(MetricsRow::train(r, t.buffer.rejected(), start.elapsed().as_secs_f64()))?;
        if let Some(set) = &eval_set {
            if r.iteration.is_multiple_of(sched.eval_every) || r.iteration == t.cfg.epochs {
                let gap = set.gap(&t.model, workers)?;
                gaps.push((r.iteration, gap));
                metrics.serialize(MetricsRow::eval(r.iteration, gap, start.elapsed().as_secs_f64()))?;
            }
        }
        metrics.flush().at(&metrics_path)?;
        if sched.checkpoint_every > 0 && r.iteration.is_multiple_of(sched.checkpoint_every) {
            save_model(&out.join(format!("checkpoint-{}.json", r.iteration)), &t.model)?;
        }
        Ok(sched.time_budget_secs.is_none_or(|b| start.elapsed().as_secs_f64() < b))
    };
    trainer.run(|r, t| match step(r, t) {
        Ok(go) => go,
        Err(e) => {
            failure = Some(e);
            false
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    save_model(&out.join("checkpoint.json"), &trainer.model)?;
    let iterations = trainer.iterations();
    Ok(TrainOutcome { model: trainer.model, dir: out.to_path_buf(), iterations, gaps })
}
