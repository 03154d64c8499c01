//! Training run configuration files: a flat JSON object whose required keys
//! are `family`, `size` and `epochs`; every other key overrides a default.

use std::fs;
use std::path::Path;

use icdc_core::diffusion::ScheduleKind;
use icdc_core::model::ModelConfig;
use icdc_core::problems::{Family, QbarMode};
use icdc_core::training::{BufferWeighting, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub family: String,
    /// `[n]` for routing families, `[jobs, machines]` for PMSP.
    pub size: Vec<usize>,
    pub epochs: usize,

    pub d: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub denoiser_layers: Option<usize>,
    pub score_hidden: Option<usize>,
    pub max_items: Option<usize>,
    pub horizon: Option<usize>,
    pub schedule: Option<String>,
    pub qbar_mode: Option<String>,

    pub learning_rate: Option<f64>,
    pub final_learning_rate: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda_prd: Option<f64>,
    pub lambda_cst: Option<f64>,
    pub cloning_steps: Option<usize>,
    pub samples: Option<usize>,
    pub rollouts_per_instance: Option<usize>,
    pub tau: Option<f64>,
    pub kappa: Option<f64>,
    pub weighting: Option<String>,
    pub batch_size: Option<usize>,
    pub capacity: Option<usize>,
    pub stride: Option<usize>,
    pub seed: Option<u64>,

    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: Option<usize>,
    /// Iterations between held-out gap evaluations; 0 disables them.
    pub eval_every: Option<usize>,
    pub eval_instances: Option<usize>,
    pub eval_samples: Option<usize>,
    pub eval_seed: Option<u64>,
    /// Stops training once this much wallclock has elapsed.
    pub time_budget_secs: Option<f64>,
}

/// Held-out evaluation and checkpoint cadence of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSchedule {
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub eval_instances: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub time_budget_secs: Option<f64>,
}

/// Seeds of held-out evaluation instances start here so that they never
/// coincide with small hand-picked seeds.
pub const DEFAULT_EVAL_SEED: u64 = 1 << 40;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn family(&self) -> Result<Family> {
        Family::from_name(&self.family).ok_or_else(|| Error::Schema(format!("key `family`: unknown value {:?}", self.family)))
    }

    pub fn instance_size(&self) -> Result<(usize, usize)> {
        match (self.family()?, self.size.as_slice()) {
            (Family::Pmsp, &[j, m]) => Ok((j, m)),
            (Family::Atsp | Family::Nav, &[n]) => Ok((n, n)),
            (f, _) => Err(Error::Schema(format!(
                "key `size`: {} expects {}",
                f.name(),
                if f == Family::Pmsp { "[jobs, machines]" } else { "[n]" }
            ))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::desk(self.family()?, self.horizon.unwrap_or(10));
        c.d = self.d.unwrap_or(c.d);
        c.encoder_layers = self.encoder_layers.unwrap_or(c.encoder_layers);
        c.denoiser_layers = self.denoiser_layers.unwrap_or(c.denoiser_layers);
        c.score_hidden = self.score_hidden.unwrap_or(c.score_hidden);
        c.max_items = self.max_items.unwrap_or(c.max_items);
        if let Some(s) = &self.schedule {
            c.schedule = ScheduleKind::from_name(s).ok_or_else(|| Error::Schema(format!("key `schedule`: unknown value {s:?}")))?;
        }
        if let Some(s) = &self.qbar_mode {
            c.qbar_mode = QbarMode::from_name(s).ok_or_else(|| Error::Schema(format!("key `qbar_mode`: unknown value {s:?}")))?;
        }
        c.validate().map_err(|e| Error::Schema(e.to_string()))?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::new(self.family()?, self.instance_size()?);
        c.epochs = self.epochs;
        c.learning_rate = self.learning_rate.unwrap_or(c.learning_rate);
        c.final_learning_rate = self.final_learning_rate.or(c.final_learning_rate);
        c.alpha = self.alpha.unwrap_or(c.alpha);
        c.lambda_prd = self.lambda_prd.unwrap_or(c.lambda_prd);
        c.lambda_cst = self.lambda_cst.unwrap_or(c.lambda_cst);
        c.cloning_steps = self.cloning_steps.unwrap_or(c.cloning_steps);
        c.samples = self.samples.unwrap_or(c.samples);
        c.rollouts_per_instance = self.rollouts_per_instance.unwrap_or(c.rollouts_per_instance);
        c.tau = self.tau.unwrap_or(c.tau);
        c.kappa = self.kappa.unwrap_or(c.kappa);
        if let Some(w) = &self.weighting {
            c.weighting = BufferWeighting::from_name(w).ok_or_else(|| Error::Schema(format!("key `weighting`: unknown value {w:?}")))?;
        }
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.capacity = self.capacity.or(c.capacity);
        c.stride = self.stride.unwrap_or(c.stride);
        c.seed = self.seed.unwrap_or(c.seed);
        c.validate().map_err(|e| Error::Schema(e.to_string()))?;
        Ok(c)
    }

    pub fn run_schedule(&self) -> RunSchedule {
        RunSchedule {
            checkpoint_every: self.checkpoint_every.unwrap_or(0),
            eval_every: self.eval_every.unwrap_or(0),
            eval_instances: self.eval_instances.unwrap_or(100),
            eval_samples: self.eval_samples.unwrap_or(32),
            eval_seed: self.eval_seed.unwrap_or(DEFAULT_EVAL_SEED),
            time_budget_secs: self.time_budget_secs,
        }
    }
}
