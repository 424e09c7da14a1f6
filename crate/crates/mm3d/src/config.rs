//! Experiment configuration: TOML-backed, range-checked, unknown keys
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Fusion, Mode, ModelConfig};
use crate::error::{MmError, Result};
use crate::phantom::PhantomConfig;
use crate::training::{LossWeights, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub proposals: usize,
    pub dim: usize,
    pub roi: usize,
    pub heads: usize,
    pub z_target: usize,
    pub fusion: Fusion,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            proposals: 8,
            dim: 16,
            roi: 3,
            heads: 6,
            z_target: 16,
            fusion: Fusion::Weighted,
            mode: Mode::ThreeD,
            seed: 0,
        }
    }
}

impl ModelSection {
    /// Concrete model configuration for a given image extent.
    pub fn build(&self, img_h: usize, img_w: usize) -> ModelConfig {
        ModelConfig {
            proposals: self.proposals,
            dim: self.dim,
            roi: self.roi,
            heads: self.heads,
            z_target: self.z_target,
            img_h,
            img_w,
            fusion: self.fusion,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub cases: usize,
    pub split: [f64; 3],
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { cases: 900, split: [0.7, 0.1, 0.2] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub flips: bool,
    pub grad_clip: f64,
    pub lambda_box: f64,
    pub lambda_proposal: f64,
    pub lambda_image: f64,
    pub lambda_breast: f64,
    pub lambda_z: f64,
    pub nms_tau: f64,
    pub val_every: usize,
    /// Slicewise regime: drop unannotated malignant cases instead of
    /// sampling random slices.
    pub slicewise_annotated_only: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 2.5e-5,
            weight_decay: 1e-4,
            epochs: 10,
            seed: 0,
            flips: true,
            grad_clip: 1.0,
            lambda_box: 2.0,
            lambda_proposal: 2.0,
            lambda_image: 1.0,
            lambda_breast: 1.0,
            lambda_z: 1.0,
            nms_tau: 0.5,
            val_every: 1,
            slicewise_annotated_only: false,
        }
    }
}

impl TrainSection {
    pub fn build(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            seed: self.seed,
            flips: self.flips,
            grad_clip: self.grad_clip,
            weights: LossWeights {
                bbox: self.lambda_box,
                proposal: self.lambda_proposal,
                image: self.lambda_image,
                breast: self.lambda_breast,
                z: self.lambda_z,
            },
            nms_tau: self.nms_tau,
            val_every: self.val_every,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub fp_targets: Vec<f64>,
    pub bootstrap: usize,
    pub seed: u64,
    pub iou_thresh: f64,
    pub restrict_fp_to_nonbenign: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            fp_targets: vec![0.25, 0.5],
            bootstrap: 200,
            seed: 0,
            iou_thresh: 0.25,
            restrict_fp_to_nonbenign: false,
        }
    }
}

impl EvalSection {
    pub fn protocol(&self) -> crate::metrics::EvalProtocol {
        crate::metrics::EvalProtocol {
            iou_thresh: self.iou_thresh,
            bootstrap: self.bootstrap,
            seed: self.seed,
            restrict_fp_to_nonbenign: self.restrict_fp_to_nonbenign,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub phantom: PhantomConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub data_fraction: f64,
    pub annotation_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSection::default(),
            dataset: DatasetSection::default(),
            phantom: PhantomConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            data_fraction: 1.0,
            annotation_fraction: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MmError::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| MmError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model
            .build(self.phantom.height, self.phantom.width)
            .validate()?;
        let checks = [
            (self.dataset.cases >= 3, "dataset.cases must be >= 3"),
            (
                self.dataset.split.iter().all(|&f| f > 0.0)
                    && (self.dataset.split.iter().sum::<f64>() - 1.0).abs() < 1e-9,
                "dataset.split must be positive and sum to 1",
            ),
            (self.train.lr > 0.0 && self.train.lr < 1.0, "train.lr out of range"),
            (
                self.train.weight_decay >= 0.0 && self.train.weight_decay < 1.0,
                "train.weight_decay out of range",
            ),
            (self.train.epochs >= 1, "train.epochs must be >= 1"),
            (
                self.train.nms_tau > 0.0 && self.train.nms_tau <= 1.0,
                "train.nms_tau must be in (0, 1]",
            ),
            (self.train.grad_clip >= 0.0, "train.grad_clip must be >= 0"),
            (
                [self.train.lambda_box, self.train.lambda_proposal, self.train.lambda_image, self.train.lambda_breast, self.train.lambda_z]
                    .iter()
                    .all(|&l| (0.0..=100.0).contains(&l)),
                "train loss weights must be in [0, 100]",
            ),
            (
                !self.eval.fp_targets.is_empty() && self.eval.fp_targets.iter().all(|&x| x > 0.0),
                "eval.fp_targets must be positive",
            ),
            (self.eval.bootstrap >= 100, "eval.bootstrap must be >= 100"),
            (
                self.eval.iou_thresh > 0.0 && self.eval.iou_thresh < 1.0,
                "eval.iou_thresh must be in (0, 1)",
            ),
            (
                self.data_fraction > 0.0 && self.data_fraction <= 1.0,
                "data_fraction must be in (0, 1]",
            ),
            (
                self.annotation_fraction >= 0.0 && self.annotation_fraction <= 1.0,
                "annotation_fraction must be in [0, 1]",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(MmError::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }
}
