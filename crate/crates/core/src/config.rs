//! Run configuration: a strict JSON document validated before any command
//! touches data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::MaskConfig;
use crate::ckpt::fnv1a;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::scene::SceneConfig;
use crate::toydet::DetectorSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene: SceneConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Steps of linear ramp from a tenth of the learning rate to its full
    /// value at the start of training.
    pub warmup_steps: usize,
    /// Per-step gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalBlockConfig {
    /// Loss-balancing weight inside the global distillation term.
    pub weight: f64,
    /// Bottleneck reduction ratio of the context block.
    pub reduction: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub teacher: DetectorSpec,
    pub student: DetectorSpec,
    pub mask: MaskConfig,
    pub loss_weights: LossWeights,
    pub global_block: GlobalBlockConfig,
    /// Teacher proposals kept per image when proposal masking is on.
    pub proposal_top_n: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl RunConfig {
    /// Desk-scale defaults: 512/128 scenes, batch 8, 24 epochs with decays
    /// at 16 and 22, one-stage mask and loss settings.
    pub fn default_desk() -> RunConfig {
        RunConfig {
            seed: 7,
            dataset: DatasetConfig {
                train_scenes: 512,
                val_scenes: 128,
                scene: SceneConfig::default(),
            },
            teacher: DetectorSpec::teacher(3),
            student: DetectorSpec::student(3),
            mask: MaskConfig::one_stage(),
            loss_weights: LossWeights::one_stage(),
            global_block: GlobalBlockConfig {
                weight: crate::gcontext::DEFAULT_GLOBAL_WEIGHT,
                reduction: 4,
            },
            proposal_top_n: 8,
            optimizer: OptimizerConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
                decay_epochs: vec![16, 22],
                decay_factor: 0.1,
                warmup_steps: 128,
                max_grad_norm: 1.0,
            },
            epochs: 24,
            batch_size: 8,
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a of the canonical JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.mask.validate()?;
        self.loss_weights.validate()?;

        if self.dataset.train_scenes == 0 || self.dataset.val_scenes == 0 {
            return Err(Error::ConfigError("dataset sizes must be nonzero".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.dataset.train_scenes {
            return Err(Error::ConfigError(format!(
                "batch size {} vs {} training scenes",
                self.batch_size, self.dataset.train_scenes
            )));
        }
        if self.epochs == 0 {
            return Err(Error::ConfigError("need at least one epoch".into()));
        }

        let o = &self.optimizer;
        if o.learning_rate <= 0.0 || !o.learning_rate.is_finite() {
            return Err(Error::ConfigError("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::ConfigError("momentum must lie in [0,1)".into()));
        }
        if o.weight_decay < 0.0 {
            return Err(Error::ConfigError("weight decay must be >= 0".into()));
        }
        if o.max_grad_norm < 0.0 {
            return Err(Error::ConfigError("max_grad_norm must be >= 0 (0 disables)".into()));
        }
        if !(0.0 < o.decay_factor && o.decay_factor <= 1.0) {
            return Err(Error::ConfigError("decay factor must lie in (0,1]".into()));
        }
        if o.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ConfigError("decay epochs must be strictly increasing".into()));
        }
        if o.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::ConfigError("decay epochs must precede the last epoch".into()));
        }

        if self.global_block.weight < 0.0 {
            return Err(Error::ConfigError("global weight must be >= 0".into()));
        }
        if self.global_block.reduction == 0
            || self.teacher.base_channels % self.global_block.reduction != 0
        {
            return Err(Error::ConfigError(format!(
                "reduction {} must divide teacher base channels {}",
                self.global_block.reduction, self.teacher.base_channels
            )));
        }
        if self.proposal_top_n == 0 {
            return Err(Error::ConfigError("proposal_top_n must be at least 1".into()));
        }

        // teacher and student must see the same world
        if self.teacher.num_classes != self.student.num_classes
            || self.teacher.num_classes != self.dataset.scene.num_classes
        {
            return Err(Error::ConfigError("class counts disagree".into()));
        }
        if self.teacher.image_size != self.student.image_size
            || self.teacher.image_size != self.dataset.scene.image_size
        {
            return Err(Error::ConfigError("image sizes disagree".into()));
        }
        if self.teacher.strides != self.student.strides {
            return Err(Error::ConfigError("teacher and student strides differ".into()));
        }
        if self.student.base_channels >= self.teacher.base_channels {
            return Err(Error::ConfigError(
                "student must be narrower than the teacher (the adapter maps student to teacher width)"
                    .into(),
            ));
        }
        // eager divisibility check: every level must tile into I x I patches
        for (level, &stride) in self.teacher.strides.iter().enumerate() {
            let size = self.teacher.image_size / stride;
            if size % self.mask.instance_size != 0 {
                return Err(Error::ConfigError(format!(
                    "instance size {} does not divide the {size}x{size} level {level} map",
                    self.mask.instance_size
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_desk_validates() {
        let cfg = RunConfig::default_desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.epochs, 24);
        assert_eq!(cfg.optimizer.decay_epochs, vec![16, 22]);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.optimizer.weight_decay, 1e-4);
    }

    #[test]
    fn json_roundtrip_and_hash_stability() {
        let cfg = RunConfig::default_desk();
        let text = cfg.to_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default_desk().to_json()).unwrap();
        v.as_object_mut().unwrap().insert("oops".into(), 1.into());
        let text = serde_json::to_string(&v).unwrap();
        assert!(matches!(RunConfig::from_json(&text), Err(Error::ConfigError(_))));
    }

    #[test]
    fn divisibility_checked_eagerly() {
        let mut cfg = RunConfig::default_desk();
        cfg.mask.instance_size = 3;
        assert!(matches!(cfg.validate(), Err(Error::ConfigError(_))));
    }

    #[test]
    fn mismatched_worlds_rejected() {
        let mut cfg = RunConfig::default_desk();
        cfg.student.num_classes = 4;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default_desk();
        cfg.student.base_channels = 32;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default_desk();
        cfg.optimizer.decay_epochs = vec![30];
        assert!(cfg.validate().is_err());
    }
}
