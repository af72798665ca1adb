//! Run configuration: one JSON document for model, tracker, loss and trainer
//! settings. Unknown keys are rejected and every constraint is checked on
//! load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::LossWeights;
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Frames per training clip; queues carry over between them, detached.
    pub clip_len: usize,
    /// Number of pre-cropped clips cycled through during training.
    pub clip_pool: usize,
    /// Search window centre jitter, relative to `√(w·h)` of the target.
    pub jitter_shift: f64,
    /// Search window log-scale jitter.
    pub jitter_scale: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Steps averaged at each end of the loss curve for the smoothed values.
    pub smooth_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 0.01,
            momentum: 0.9,
            clip_len: 3,
            clip_pool: 64,
            jitter_shift: 0.25,
            jitter_scale: 0.15,
            grad_clip: Some(5.0),
            smooth_window: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clip_len == 0 || self.clip_pool == 0 || self.smooth_window == 0 {
            return bad("clip_len, clip_pool and smooth_window must be positive".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("lr {} / momentum {} out of range", self.lr, self.momentum));
        }
        if !(self.jitter_shift >= 0.0) || !(self.jitter_scale >= 0.0) {
            return bad("jitter must be nonnegative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Default file locations; command-line arguments take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        if !(self.loss.alpha >= 0.0 && self.loss.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights {:?} must be nonnegative",
                self.loss
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
