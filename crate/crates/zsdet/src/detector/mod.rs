//! Two-stage detection head with three departures from the standard recipe:
//! objectness-weighted feature distillation toward cached encoder features,
//! a cosine text-embedding classifier with a learnable background vector,
//! and a box regressor conditioned on the category embedding. Includes a toy
//! backbone, RoIAlign and a minimal single-scale RPN sufficient for
//! desk-scale end-to-end training, plus inference with novel-category
//! vocabulary extension.

pub mod assign;
pub mod backbone;
pub mod boxcodec;
pub mod checkpoint;
pub mod heads;
pub mod infer;
pub mod losses;
pub mod roi;
pub mod rpn;
pub mod train;

use serde::{Deserialize, Serialize};

/// Detector hyperparameters. Defaults follow the full-scale training recipe;
/// toy runs shrink sizes and schedules via config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Backbone channel progression; the last entry is the feature map depth.
    pub backbone_channels: Vec<usize>,
    /// Backbone strides per conv block; their product is the feature stride.
    pub backbone_strides: Vec<usize>,
    /// RoIAlign output grid side.
    pub roi_pool_size: usize,
    /// Channel width inside the head conv stacks.
    pub head_channels: usize,
    /// Hidden width of the classification branch's first linear layer.
    pub head_hidden: usize,
    /// Regression branch output dimension (concatenated with the D-dim
    /// category embedding before the delta map).
    pub regressor_dim: usize,
    /// Embedding dimension D; must match the encoder and the proposal store.
    pub embed_dim: usize,
    /// Cosine temperature.
    pub tau: f64,
    /// Foreground IoU threshold for proposal assignment.
    pub fg_iou: f64,
    /// Proposals sampled per image for the classification head.
    pub roi_batch: usize,
    /// Foreground fraction of the sampled proposals.
    pub fg_fraction: f64,
    /// Whether to L2-normalize both sides of the distillation loss.
    pub normalize_distill: bool,
    /// Stored distillation regions whose objectness reaches this value are
    /// excluded from the background pool during proposal sampling; they
    /// likely cover unannotated objects.
    pub ignore_objectness: f64,
    /// Extra regression samples per ground-truth box, produced by randomly
    /// jittering the box. They widen the displacement range the regressor
    /// sees beyond the already-tight RPN proposals.
    pub reg_jitters_per_gt: usize,
    /// Disables the distillation term (ablation switch).
    pub distill: bool,
    pub rpn: rpn::RpnConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is divided by 10.
    pub decay_epochs: Vec<usize>,
    /// Global gradient-norm clip applied before each step; 0 disables it.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_iters: 500,
            warmup_ratio: 1e-3,
            epochs: 12,
            decay_epochs: vec![],
            clip_norm: 10.0,
        }
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 64, 64],
            backbone_strides: vec![2, 2, 2, 1],
            roi_pool_size: 7,
            head_channels: 64,
            head_hidden: 256,
            regressor_dim: 256,
            embed_dim: 512,
            tau: 0.01,
            fg_iou: 0.5,
            roi_batch: 512,
            fg_fraction: 0.25,
            normalize_distill: false,
            ignore_objectness: 0.9,
            reg_jitters_per_gt: 4,
            distill: true,
            rpn: rpn::RpnConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn feature_stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    /// Small configuration for minutes-scale CPU training on toy data.
    pub fn toy(embed_dim: usize, seed: u64) -> Self {
        Self {
            backbone_channels: vec![16, 32, 32, 32],
            backbone_strides: vec![2, 2, 2, 1],
            roi_pool_size: 5,
            head_channels: 32,
            head_hidden: 128,
            regressor_dim: 64,
            embed_dim,
            tau: 0.05,
            roi_batch: 48,
            rpn: rpn::RpnConfig::toy(),
            optimizer: OptimizerConfig {
                epochs: 3,
                warmup_iters: 50,
                ..Default::default()
            },
            seed,
            ..Default::default()
        }
    }
}
