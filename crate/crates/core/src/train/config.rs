use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FbankConfig;
use crate::models::{AamConfig, BackboneConfig, EstimatorConfig};
use crate::reprogram::ScoreMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    AdaptVanilla,
    AdaptGradEst,
    Eval,
    Sweep,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::AdaptVanilla => "adapt_vanilla",
            Mode::AdaptGradEst => "adapt_grad_est",
            Mode::Eval => "eval",
            Mode::Sweep => "sweep",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => Mode::Pretrain,
            "adapt_vanilla" => Mode::AdaptVanilla,
            "adapt_grad_est" => Mode::AdaptGradEst,
            "eval" => Mode::Eval,
            "sweep" => Mode::Sweep,
            other => return Err(Error::config(format!("unknown mode `{other}`"))),
        })
    }
}

/// Padding size: total length `l`, segment count `k`, and init scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaddingConfig {
    pub l: usize,
    pub k: usize,
    pub init_std: f64,
}

impl Default for PaddingConfig {
    fn default() -> Self {
        PaddingConfig {
            l: 0,
            k: 1,
            init_std: 1e-3,
        }
    }
}

impl PaddingConfig {
    pub fn segment_len(&self) -> usize {
        self.l / self.k.max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub crop_seconds: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub small_data_mode: bool,
    pub score_mode: ScoreMode,
    pub padding: PaddingConfig,
    pub aam: AamConfig,
    pub fbank: FbankConfig,
    pub backbone: BackboneConfig,
    pub estimator: EstimatorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::AdaptVanilla,
            seed: 0,
            crop_seconds: 2.0,
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            lr_drop_epochs: vec![10, 15],
            lr_drop_factor: 10.0,
            weight_decay: 1e-4,
            small_data_mode: false,
            score_mode: ScoreMode::MeanAll,
            padding: PaddingConfig::default(),
            aam: AamConfig::default(),
            fbank: FbankConfig::default(),
            backbone: BackboneConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The configuration actually trained with: small-data mode replaces the
    /// schedule with 100 epochs and drops at 60 and 80.
    pub fn effective(&self) -> ExperimentConfig {
        let mut c = self.clone();
        if c.small_data_mode {
            c.epochs = 100;
            c.lr_drop_epochs = vec![60, 80];
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.effective();
        if !(c.crop_seconds > 0.0 && c.crop_seconds.is_finite()) {
            return Err(Error::config("crop_seconds must be positive"));
        }
        if c.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if c.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(c.lr > 0.0 && c.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(c.lr_drop_factor >= 1.0 && c.lr_drop_factor.is_finite()) {
            return Err(Error::config("lr_drop_factor must be >= 1"));
        }
        if !(c.weight_decay >= 0.0 && c.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if c.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "lr_drop_epochs must be strictly increasing, got {:?}",
                c.lr_drop_epochs
            )));
        }
        if let Some(&last) = c.lr_drop_epochs.last() {
            if last >= c.epochs {
                return Err(Error::config(format!(
                    "lr_drop_epochs {:?} must all be below epochs ({})",
                    c.lr_drop_epochs, c.epochs
                )));
            }
        }
        if c.padding.k == 0 || !c.padding.l.is_multiple_of(c.padding.k) {
            return Err(Error::config(format!(
                "padding l={} must be divisible by k={} (k >= 1)",
                c.padding.l, c.padding.k
            )));
        }
        if !(c.padding.init_std >= 0.0 && c.padding.init_std.is_finite()) {
            return Err(Error::config("padding init_std must be >= 0"));
        }
        if c.score_mode == ScoreMode::MeanOffdiag && c.padding.k < 2 {
            return Err(Error::config("score_mode mean_offdiag needs padding k >= 2"));
        }
        c.aam.validate()?;
        c.fbank.validate()?;
        c.backbone.validate()?;
        c.estimator.validate()?;
        let frames = c.fbank.num_frames(self.crop_samples());
        let need = c.backbone.min_frames().max(c.estimator.min_frames());
        if frames < need {
            return Err(Error::config(format!(
                "crop of {} s gives {frames} frames; the networks need at least {need}",
                c.crop_seconds
            )));
        }
        Ok(())
    }

    pub fn crop_samples(&self) -> usize {
        (self.crop_seconds * self.fbank.sample_rate_hz as f64).round() as usize
    }

    /// Learning rate in effect during 1-based `epoch`: divided by the drop
    /// factor once for every drop epoch strictly before it.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let c = self.effective();
        let drops = c.lr_drop_epochs.iter().filter(|&&d| epoch > d).count();
        c.lr / c.lr_drop_factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_is_exact() {
        let c = ExperimentConfig::default();
        for e in 1..=20 {
            let expected = if e <= 10 {
                1e-3
            } else if e <= 15 {
                1e-4
            } else {
                1e-5
            };
            assert_eq!(c.lr_at(e), expected, "epoch {e}");
        }
    }

    #[test]
    fn small_data_mode_overrides_schedule() {
        let c = ExperimentConfig {
            small_data_mode: true,
            ..Default::default()
        };
        let e = c.effective();
        assert_eq!(e.epochs, 100);
        assert_eq!(e.lr_drop_epochs, vec![60, 80]);
        assert_eq!(c.lr_at(60), 1e-3);
        assert_eq!(c.lr_at(61), 1e-4);
        assert_eq!(c.lr_at(81), 1e-5);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            c.validate().unwrap_err().to_string()
        };
        assert!(bad(|c| c.lr_drop_epochs = vec![15, 10]).contains("increasing"));
        assert!(bad(|c| c.lr_drop_epochs = vec![10, 20]).contains("below epochs"));
        assert!(bad(|c| c.padding = PaddingConfig { l: 10, k: 3, init_std: 0.0 }).contains("divisible"));
        assert!(bad(|c| c.score_mode = ScoreMode::MeanOffdiag).contains("k >= 2"));
        assert!(bad(|c| c.crop_seconds = 0.05).contains("frames"));
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig {
            padding: PaddingConfig { l: 6400, k: 2, init_std: 1e-3 },
            ..Default::default()
        };
        let text = toml::to_string(&c).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
