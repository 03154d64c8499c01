//! Versioned JSON checkpoints holding the model configuration, every named
//! tensor and the running batch-norm statistics.

use std::fs;
use std::path::Path;

use icdc_core::diffusion::ScheduleKind;
use icdc_core::model::{IcdcModel, ModelConfig, RunningStats};
use icdc_core::problems::{Family, QbarMode};
use icdc_core::{rng_from_seed, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::formats::to_json_exact;

pub const CHECKPOINT_FORMAT: &str = "icdc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: String,
    pub d: usize,
    pub encoder_layers: usize,
    pub denoiser_layers: usize,
    pub score_hidden: usize,
    pub max_items: usize,
    pub horizon: usize,
    pub schedule: String,
    pub qbar_mode: String,
}

impl From<&ModelConfig> for ModelSpec {
    fn from(c: &ModelConfig) -> Self {
        Self {
            family: c.family.name().into(),
            d: c.d,
            encoder_layers: c.encoder_layers,
            denoiser_layers: c.denoiser_layers,
            score_hidden: c.score_hidden,
            max_items: c.max_items,
            horizon: c.horizon,
            schedule: c.schedule.name().into(),
            qbar_mode: c.qbar_mode.name().into(),
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self) -> Result<ModelConfig> {
        let family = Family::from_name(&self.family).ok_or_else(|| Error::Schema(format!("unknown family {:?}", self.family)))?;
        let schedule =
            ScheduleKind::from_name(&self.schedule).ok_or_else(|| Error::Schema(format!("unknown schedule {:?}", self.schedule)))?;
        let qbar_mode =
            QbarMode::from_name(&self.qbar_mode).ok_or_else(|| Error::Schema(format!("unknown qbar mode {:?}", self.qbar_mode)))?;
        let mut c = ModelConfig::new(family, self.d, self.encoder_layers, self.denoiser_layers, self.horizon);
        c.score_hidden = self.score_hidden;
        c.max_items = self.max_items;
        c.schedule = schedule;
        c.qbar_mode = qbar_mode;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormRecord {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    pub tensors: Vec<TensorRecord>,
    pub running: Vec<NormRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &IcdcModel) -> Self {
        let p = model.params();
        let tensors = p
            .names()
            .iter()
            .zip(p.values())
            .map(|(name, m)| TensorRecord { name: name.clone(), rows: m.rows(), cols: m.cols(), data: m.as_slice().to_vec() })
            .collect();
        let running = model.running_stats().iter().map(|r| NormRecord { mean: r.mean.clone(), var: r.var.clone() }).collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: ModelSpec::from(model.config()),
            tensors,
            running,
        }
    }

    /// Rebuilds the model; every tensor must be present with the shape the
    /// configuration implies.
    pub fn to_model(&self) -> Result<IcdcModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                self.format, self.version
            )));
        }
        let mut model = IcdcModel::init(self.model.to_config()?, &mut rng_from_seed(0))?;
        let expected = model.params().names().to_vec();
        let mut seen: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        seen.sort_unstable();
        let mut want: Vec<&str> = expected.iter().map(String::as_str).collect();
        want.sort_unstable();
        if seen != want {
            return Err(Error::Schema("checkpoint tensors do not match the architecture".into()));
        }
        for t in &self.tensors {
            let m = Matrix::from_vec(t.rows, t.cols, t.data.clone()).map_err(|e| Error::Schema(format!("tensor {}: {e}", t.name)))?;
            model.params_mut().set(&t.name, m).map_err(|e| Error::Schema(e.to_string()))?;
        }
        let running = self.running.iter().map(|r| RunningStats { mean: r.mean.clone(), var: r.var.clone() }).collect();
        model.set_running_stats(running).map_err(|e| Error::Schema(e.to_string()))?;
        Ok(model)
    }
}

pub fn save_model(path: &Path, model: &IcdcModel) -> Result<()> {
    fs::write(path, to_json_exact(&Checkpoint::from_model(model))?).at(path)
}

pub fn load_model(path: &Path) -> Result<IcdcModel> {
    let text = fs::read_to_string(path).at(path)?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() })?;
    ck.to_model()
}
