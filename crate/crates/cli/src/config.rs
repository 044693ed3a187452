//! Run configuration: one TOML file drives simulation, training, evaluation
//! and explanation, and is embedded verbatim into every report.

use mcam_core::cam::GateAxis;
use mcam_core::simulator::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub scenario: ScenarioConfig,
}

/// Optimization schedule. The learning rate steps down by x0.1 once the
/// epoch index reaches `lr_decay_epoch` (a plain step decay; no further
/// decay law is applied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_epoch: usize,
    pub lambda: f64,
    pub beta: f64,
    pub label_smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel constant C; every derived width is a multiple of it.
    pub channels: usize,
    /// Decoder embedding width.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_text: usize,
    /// "position" normalizes the gate over grid positions (spatial
    /// attribution); "channel" over the channel axis.
    pub gate_axis: String,
    /// Drop the causal-analysis stage; the decoder then reads the fused
    /// multi-level feature directly.
    #[serde(default)]
    pub ablate_cam: bool,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            seed: 7,
            train: TrainConfig {
                batch_size: 16,
                epochs: 40,
                initial_lr: 3e-4,
                lr_decay_epoch: 16,
                lambda: 0.01,
                beta: 0.5,
                label_smoothing: 0.1,
            },
            model: ModelConfig {
                channels: 4,
                width: 64,
                layers: 2,
                heads: 4,
                max_text: 16,
                gate_axis: "position".into(),
                ablate_cam: false,
            },
            scenario: ScenarioConfig {
                num_factors: 4,
                spurious_rho: 0.9,
                frame_dims: [4, 64, 96],
                noise_sigma: 0.05,
                episodes: 500,
                seed: 7,
                spurious: None,
                render: true,
            },
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, HarnessError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config, HarnessError> {
        Config::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Point every seeded component at one seed (CLI `--seed` override).
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.scenario.seed = seed;
    }

    pub fn gate_axis(&self) -> Result<GateAxis, HarnessError> {
        match self.model.gate_axis.as_str() {
            "channel" => Ok(GateAxis::Channel),
            "position" => Ok(GateAxis::Position),
            other => Err(HarnessError::BadConfig(format!(
                "gate_axis {other:?} must be \"channel\" or \"position\""
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::BadConfig(m));
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(t.initial_lr > 0.0) {
            return bad(format!("initial_lr {} must be positive", t.initial_lr));
        }
        if t.lambda < 0.0 || t.beta < 0.0 || !(0.0..1.0).contains(&t.label_smoothing) {
            return bad("lambda/beta must be >= 0 and label_smoothing in [0, 1)".into());
        }
        let m = &self.model;
        if m.channels == 0 || m.width == 0 || m.layers == 0 || m.heads == 0 {
            return bad("model dims must be positive".into());
        }
        if m.width % m.heads != 0 {
            return bad(format!("width {} must be divisible by heads {}", m.width, m.heads));
        }
        if m.max_text < 2 {
            return bad("max_text must be at least 2".into());
        }
        self.gate_axis()?;
        self.scenario.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = Config::default();
        cfg.train.initial_lr = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = Config::default();
        cfg.model.width = 63;
        assert!(cfg.validate().is_err());

        let mut cfg = Config::default();
        cfg.model.gate_axis = "diagonal".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reseed_propagates_to_scenario() {
        let mut cfg = Config::default();
        cfg.reseed(99);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.scenario.seed, 99);
    }
}
