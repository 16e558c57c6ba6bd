//! Model and experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Where and how image guidance enters the cost aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GceMode {
    /// Plain hourglass, no guidance.
    Off,
    /// Gate only the first aggregation block.
    One,
    /// Gate after every conv/deconv block except the last.
    Full,
    /// Broadcast-add projected image features instead of gating.
    Additive,
}

/// Operator used at each guided aggregation site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggBaseline {
    /// Per-pixel channel excitation.
    Gce,
    /// Image-guided 3×3 neighbourhood aggregation.
    Neighborhood,
}

/// Everything that determines network shape and regression behaviour.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoConfig {
    pub height: usize,
    pub width: usize,
    /// Maximum disparity at full resolution; a multiple of 4.
    pub max_disparity: usize,
    pub top_k: usize,
    pub gce_mode: GceMode,
    pub agg_baseline: AggBaseline,
    /// Encoder widths at scales 4, 8, 16, 32.
    pub feature_widths: [usize; 4],
    /// Aggregator widths at cost-volume scales 4, 8, 16, 32.
    pub agg_widths: [usize; 4],
}

impl StereoConfig {
    /// Disparity hypotheses at quarter resolution.
    pub fn quarter_disparities(&self) -> usize {
        self.max_disparity / 4
    }

    pub fn validate(&self) -> Result<()> {
        validate_extents(self.height, self.width)?;
        let d = self.max_disparity;
        if d == 0 || !d.is_multiple_of(4) {
            return Err(config_err!("max_disparity {d} must be a positive multiple of 4"));
        }
        let dq = d / 4;
        if dq < 2 {
            return Err(config_err!("at least 2 quarter-resolution disparities required"));
        }
        if !dq.is_multiple_of(8) {
            return Err(config_err!(
                "max_disparity/4 = {dq} must be divisible by 8 for the three-level hourglass"
            ));
        }
        if dq > self.width / 4 {
            return Err(config_err!("max_disparity {d} exceeds image width {}", self.width));
        }
        validate_k(self.top_k, dq)?;
        if self.feature_widths.iter().chain(&self.agg_widths).any(|&c| c == 0) {
            return Err(config_err!("channel widths must be positive"));
        }
        Ok(())
    }

    /// Same model at different image extents (cropping, inference on other sizes).
    pub fn with_extents(&self, height: usize, width: usize) -> Self {
        Self { height, width, ..self.clone() }
    }
}

pub(crate) fn validate_extents(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(crate::error::dim_err!("image extents {h}×{w} must be positive multiples of 32"));
    }
    Ok(())
}

pub(crate) fn validate_k(k: usize, dq: usize) -> Result<()> {
    if k == 0 || k > dq {
        return Err(config_err!("top-k {k} outside 1..={dq}"));
    }
    Ok(())
}

/// Full experiment record, read from and written to JSON.
///
/// Unknown keys are rejected; every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Image height in pixels (multiple of 32). Default 64.
    pub height: usize,
    /// Image width in pixels (multiple of 32). Default 128.
    pub width: usize,
    /// Maximum full-resolution disparity, multiple of 32. Default 32.
    pub max_disparity: usize,
    /// Top-k used for training and, unless overridden, evaluation. Default 2.
    pub top_k: usize,
    /// Test-time top-k override. Default none.
    pub eval_top_k: Option<usize>,
    /// `off`, `one`, `full` or `additive`. Default `full`.
    pub gce_mode: GceMode,
    /// `gce` or `neighborhood`. Default `gce`.
    pub agg_baseline: AggBaseline,
    /// Encoder widths at 1/4..1/32. Default [16, 24, 32, 48].
    pub feature_widths: [usize; 4],
    /// Aggregator widths at 1/4..1/32. Default [4, 8, 16, 24].
    pub agg_widths: [usize; 4],
    /// Seed for initialization, cropping and sample order. Default 0.
    pub seed: u64,
    /// Adam steps. Default 3000.
    pub steps: usize,
    /// Samples per step. Default 2.
    pub batch_size: usize,
    /// Learning rate of the first phase. Default 1e-3.
    pub lr: f64,
    /// Learning rate after `lr_drop_at * steps`. Default 1e-4.
    pub lr_late: f64,
    /// Fraction of steps run at `lr`. Default 0.8.
    pub lr_drop_at: f64,
    /// Random crop height for training (multiple of 32). Default 64.
    pub crop_height: usize,
    /// Random crop width for training (multiple of 32). Default 64.
    pub crop_width: usize,
    /// Number of generated training samples. Default 200.
    pub train_samples: usize,
    /// Number of held-out samples. Default 40.
    pub eval_samples: usize,
    /// First seed of the held-out range. Default 1_000_000.
    pub eval_seed_base: u64,
    /// Steps between held-out evaluations; 0 disables. Default 250.
    pub eval_interval: usize,
    /// Worker threads; results do not depend on this. Default 1.
    pub threads: usize,
    /// Dataset directory; generated in memory when absent.
    pub data_dir: Option<PathBuf>,
    /// Directory for checkpoints and metrics logs. Default `runs`.
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            max_disparity: 32,
            top_k: 2,
            eval_top_k: None,
            gce_mode: GceMode::Full,
            agg_baseline: AggBaseline::Gce,
            feature_widths: [16, 24, 32, 48],
            agg_widths: [4, 8, 16, 24],
            seed: 0,
            steps: 3000,
            batch_size: 2,
            lr: 1e-3,
            lr_late: 1e-4,
            lr_drop_at: 0.8,
            crop_height: 64,
            crop_width: 64,
            train_samples: 200,
            eval_samples: 40,
            eval_seed_base: 1_000_000,
            eval_interval: 250,
            threads: 1,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stereo(&self) -> StereoConfig {
        StereoConfig {
            height: self.height,
            width: self.width,
            max_disparity: self.max_disparity,
            top_k: self.top_k,
            gce_mode: self.gce_mode,
            agg_baseline: self.agg_baseline,
            feature_widths: self.feature_widths,
            agg_widths: self.agg_widths,
        }
    }

    pub fn eval_k(&self) -> usize {
        self.eval_top_k.unwrap_or(self.top_k)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stereo();
        s.validate()?;
        if let Some(k) = self.eval_top_k {
            validate_k(k, s.quarter_disparities())?;
        }
        s.with_extents(self.crop_height, self.crop_width).validate()?;
        if self.crop_height > self.height || self.crop_width > self.width {
            return Err(config_err!("crop larger than image"));
        }
        if self.max_disparity > self.width / 2 {
            return Err(config_err!("max_disparity exceeds width/2"));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(config_err!("batch_size and threads must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) || self.lr <= 0.0 || self.lr_late <= 0.0 {
            return Err(config_err!("invalid learning-rate schedule"));
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(config_err!("sample counts must be positive"));
        }
        Ok(())
    }

    /// Learning rate at 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) < self.lr_drop_at * self.steps as f64 {
            self.lr
        } else {
            self.lr_late
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        assert_eq!(Config::default().stereo().quarter_disparities(), 8);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_json(r#"{"bogus": 1}"#).is_err());
        let c = Config::from_json(r#"{"top_k": 8, "gce_mode": "off"}"#).unwrap();
        assert_eq!(c.top_k, 8);
        assert_eq!(c.gce_mode, GceMode::Off);
    }

    #[test]
    fn json_roundtrip() {
        let c = Config::default();
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn invalid_values() {
        let mut s = Config::default().stereo();
        s.max_disparity = 30;
        assert!(s.validate().is_err());
        let mut s = Config::default().stereo();
        s.top_k = 9;
        assert!(s.validate().is_err());
        s.top_k = 0;
        assert!(s.validate().is_err());
        let mut s = Config::default().stereo();
        s.height = 48;
        assert!(s.validate().is_err());
    }
}
