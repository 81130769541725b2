//! Run configuration: model shape, per-stage training hyperparameters and
//! data preparation, loaded from TOML and overridable from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{NormalizationStats, AUDIOSET_STATS};
use crate::error::{ensure, Error, Result};
use crate::losses::{LossWeights, SrlAggregation};
use crate::mixer::MixStrategy;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// 1: unmixed pre-training; 2: adds partially mixed inputs and SRL.
    pub stage: u8,
    pub epochs: usize,
    /// Overrides `epochs × steps per epoch` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Masked clones per input (n_MC).
    pub clone_batch: usize,
    pub peak_learning_rate: f64,
    pub minimum_learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer_momentum: [f64; 2],
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of patches hidden from the student.
    pub mask_ratio: f64,
    pub mask_block: usize,
    pub ema_start: f64,
    pub ema_end: f64,
    /// Layers averaged for the mixed global / local targets. Unset means the
    /// encoder depth. Unmixed and source-retention targets always average
    /// every layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k_global: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k_local: Option<usize>,
    pub normalize_targets: bool,
    pub mix_strategy: MixStrategy,
    pub srl_aggregation: SrlAggregation,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Ready batches buffered ahead of the update loop.
    pub prefetch: usize,
}

impl StageConfig {
    /// Desk-scale defaults: batch 4 and 4 clones for either stage.
    pub fn desk(stage: u8) -> Self {
        let (peak, warmup) = if stage == 1 { (5e-4, 30) } else { (2e-4, 30) };
        Self {
            stage,
            epochs: 10,
            steps: None,
            warmup_steps: warmup,
            batch_size: 4,
            clone_batch: 4,
            peak_learning_rate: peak,
            minimum_learning_rate: 1e-6,
            weight_decay: 0.05,
            optimizer_momentum: [0.9, 0.95],
            adam_eps: 1e-8,
            grad_clip: 1.0,
            mask_ratio: 0.8,
            mask_block: 5,
            ema_start: 0.999,
            ema_end: 0.99999,
            top_k_global: Some(1),
            top_k_local: None,
            normalize_targets: true,
            mix_strategy: MixStrategy::default(),
            srl_aggregation: SrlAggregation::default(),
            loss_weights: if stage == 1 {
                LossWeights::unmixed_only()
            } else {
                LossWeights::default()
            },
            seed: 0,
            checkpoint_every: 0,
            prefetch: 4,
        }
    }

    /// Full-scale schedule: 16 clones and 400K steps for stage 1, 8 clones
    /// and 200K steps for stage 2, batch 12.
    pub fn full_scale(stage: u8) -> Self {
        let mut c = Self::desk(stage);
        c.batch_size = 12;
        c.epochs = if stage == 1 { 10 } else { 5 };
        if stage == 1 {
            c.clone_batch = 16;
            c.peak_learning_rate = 5e-4;
            c.steps = Some(400_000);
            c.warmup_steps = 53_000;
        } else {
            c.clone_batch = 8;
            c.peak_learning_rate = 5e-5;
            c.steps = Some(200_000);
            c.warmup_steps = 25_000;
        }
        c
    }

    pub fn keep_ratio(&self) -> f64 {
        1.0 - self.mask_ratio
    }

    pub fn mixing_enabled(&self) -> bool {
        self.stage == 2 && self.loss_weights.uses_mixing()
    }

    pub fn total_steps(&self, steps_per_epoch: u64) -> u64 {
        self.steps.unwrap_or(self.epochs as u64 * steps_per_epoch)
    }

    /// Fills unset top-k values with `depth`.
    pub fn resolve(&mut self, depth: usize) {
        self.top_k_global.get_or_insert(depth);
        self.top_k_local.get_or_insert(depth);
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        ensure!(matches!(self.stage, 1 | 2), InvalidArgument, "stage must be 1 or 2, got {}", self.stage);
        ensure!(self.batch_size >= 1, InvalidArgument, "batch_size must be positive");
        ensure!(
            self.stage == 1 || self.batch_size >= 2,
            InvalidArgument,
            "stage 2 mixes neighbouring items and needs batch_size >= 2"
        );
        ensure!(self.clone_batch >= 1, InvalidArgument, "clone_batch must be positive");
        ensure!(
            self.mask_ratio > 0.0 && self.mask_ratio < 1.0,
            InvalidArgument,
            "mask_ratio must lie in (0, 1)"
        );
        ensure!(self.mask_block >= 1, InvalidArgument, "mask_block must be positive");
        ensure!(
            self.peak_learning_rate >= 0.0 && self.minimum_learning_rate >= 0.0,
            InvalidArgument,
            "learning rates must be non-negative"
        );
        ensure!(
            self.minimum_learning_rate <= self.peak_learning_rate,
            InvalidArgument,
            "minimum learning rate exceeds peak"
        );
        let [b1, b2] = self.optimizer_momentum;
        ensure!(
            (0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2),
            InvalidArgument,
            "optimizer momenta must lie in [0, 1)"
        );
        ensure!(self.weight_decay >= 0.0 && self.grad_clip >= 0.0, InvalidArgument, "weight decay and clip must be non-negative");
        ensure!(
            0.0 < self.ema_start && self.ema_start <= self.ema_end && self.ema_end < 1.0,
            InvalidArgument,
            "EMA momenta must satisfy 0 < start <= end < 1"
        );
        for (name, k) in [("top_k_global", self.top_k_global), ("top_k_local", self.top_k_local)] {
            if let Some(k) = k {
                ensure!((1..=depth).contains(&k), InvalidArgument, "{name} {k} outside 1..={depth}");
            }
        }
        self.loss_weights.validate()?;
        if self.stage == 1 {
            ensure!(
                !self.loss_weights.uses_mixing(),
                InvalidArgument,
                "stage 1 trains on unmixed audio only; mixed and SRL weights must be 0"
            );
        }
        ensure!(
            self.loss_weights.uses_unmixed() || self.mixing_enabled(),
            InvalidArgument,
            "every loss weight is zero"
        );
        ensure!(self.prefetch >= 1, InvalidArgument, "prefetch depth must be positive");
        Ok(())
    }

    /// Checks the warmup/total relation once the step count is known.
    pub fn validate_schedule(&self, total_steps: u64) -> Result<()> {
        ensure!(total_steps > 0, InvalidArgument, "run has zero steps");
        ensure!(
            self.warmup_steps < total_steps,
            InvalidArgument,
            "warmup_steps {} must be below total steps {total_steps}",
            self.warmup_steps
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Frames per clip after padding/truncation; a multiple of 16.
    pub frames: usize,
    pub dataset_mean: f64,
    pub dataset_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 992,
            dataset_mean: AUDIOSET_STATS.mean,
            dataset_std: AUDIOSET_STATS.std,
        }
    }
}

impl DataConfig {
    pub fn stats(&self) -> NormalizationStats {
        NormalizationStats {
            mean: self.dataset_mean,
            std: self.dataset_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: StageConfig,
}

impl RunConfig {
    pub fn desk(stage: u8) -> Self {
        Self {
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            train: StageConfig::desk(stage),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        let grid = self.model.grid;
        ensure!(
            self.data.frames == grid.cols * crate::patcher::PATCH && crate::dsp::N_MELS == grid.rows * crate::patcher::PATCH,
            InvalidArgument,
            "{} frames x {} mel bins do not tile the {}x{} patch grid",
            self.data.frames,
            crate::dsp::N_MELS,
            grid.rows,
            grid.cols
        );
        ensure!(
            self.data.dataset_std > 0.0 && self.data.dataset_std.is_finite(),
            InvalidArgument,
            "dataset_std must be positive"
        );
        self.train.validate(self.model.encoder.depth)
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_roundtrip() {
        assert_eq!(StageConfig::full_scale(1).clone_batch, 16);
        assert_eq!(StageConfig::full_scale(2).clone_batch, 8);
        let mut c = RunConfig::desk(2);
        c.train.resolve(c.model.encoder.depth);
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert_eq!(c.hash().unwrap(), RunConfig::from_toml(&text).unwrap().hash().unwrap());
        assert!(RunConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
    }

    #[test]
    fn stage_rules() {
        let mut c = RunConfig::desk(1);
        c.validate().unwrap();
        c.train.loss_weights = LossWeights::default();
        assert!(c.validate().is_err(), "stage 1 must not mix");
        let mut c = RunConfig::desk(2);
        c.train.batch_size = 1;
        assert!(c.validate().is_err());
        let c = RunConfig::desk(2);
        assert!(c.train.validate_schedule(c.train.warmup_steps).is_err());
        assert!(c.train.validate_schedule(c.train.warmup_steps + 1).is_ok());
    }
}
