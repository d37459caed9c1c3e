//! The multi-task network: pyramid backbone, depth branch with point-cloud
//! conversion, region proposals, and the recognition, mask and volume heads.

mod checkpoint;
mod infer;
pub mod layers;
mod net;
mod rpn;
mod targets;

pub use checkpoint::{
    load_checkpoint_file, save_checkpoint_file, CheckpointError, TrainerSection,
};
pub use infer::{paste_mask, Detection, NetworkOutputs};
pub use layers::ForwardCtx;
pub use net::{image_to_tensor, stack_batch, FlowNodes, MealNet};
pub use rpn::{decode_proposals, generate_anchors, nms, sort_by_score_desc, Anchor};
pub use targets::{
    assign_targets, box_iou, decode_box, encode_box, rasterize_mask_target, BoxNorm, RoiTarget,
};

/// Builds the opaque trainer section a checkpoint can carry.
pub fn checkpoint_section(
    state_json: String,
    momentum: Vec<(String, crate::nn::Tensor<f32>)>,
) -> TrainerSection {
    TrainerSection {
        state_json,
        momentum,
    }
}

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraIntrinsics;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("input image is {got_w}x{got_h}, expected square {expect}x{expect}")]
    BadInput {
        got_w: usize,
        got_h: usize,
        expect: usize,
    },
}

/// Network hyperparameters. The defaults are the desk-scale configuration;
/// paper-scale widths stay selectable through the same fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    /// Class-logit count including background (6 + 1 by default).
    pub num_classes: usize,
    /// Uniform channel width of the feature pyramid (paper-scale: 256).
    pub backbone_channels: usize,
    /// Residual stage widths.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    /// Uniform channel width of the depth decoder (paper-scale: 256).
    pub depth_decoder_channels: usize,
    /// Channel width of the volume head convolutions (paper-scale: 1024).
    pub volume_head_width: usize,
    pub iou_positive_threshold: f64,
    pub rpn_proposals: usize,
    pub kept_candidates: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_aspect_ratios: Vec<f64>,
    pub rpn_nms_threshold: f64,
    pub detection_nms_threshold: f64,
    pub detection_score_threshold: f64,
    /// RoI patch edge for the mask and volume heads; recognition uses half.
    pub roi_feature_size: usize,
    pub mask_size: usize,
    pub camera: CameraIntrinsics,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 256,
            num_classes: 7,
            backbone_channels: 64,
            stage_channels: [32, 64, 128, 256],
            blocks_per_stage: 2,
            depth_decoder_channels: 16,
            volume_head_width: 256,
            iou_positive_threshold: 0.7,
            rpn_proposals: 1000,
            kept_candidates: 50,
            anchor_scales: vec![1.0, 1.26, 1.587],
            anchor_aspect_ratios: vec![0.5, 1.0, 2.0],
            rpn_nms_threshold: 0.7,
            detection_nms_threshold: 0.5,
            detection_score_threshold: 0.5,
            roi_feature_size: 14,
            mask_size: 28,
            camera: CameraIntrinsics::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale training preset: the defaults with a narrower volume head
    /// so an overfit run fits the CPU budget.
    pub fn desk() -> Self {
        ModelConfig {
            volume_head_width: 64,
            ..ModelConfig::default()
        }
    }

    /// Miniature configuration for numerical tests.
    pub fn tiny(input_size: usize) -> Self {
        ModelConfig {
            input_size,
            backbone_channels: 8,
            stage_channels: [8, 8, 16, 16],
            blocks_per_stage: 1,
            depth_decoder_channels: 4,
            volume_head_width: 8,
            rpn_proposals: 64,
            kept_candidates: 8,
            ..ModelConfig::default()
        }
    }

    /// The four depth output resolutions, smallest first; the largest equals
    /// the ground-truth resolution.
    pub fn depth_scales(&self) -> [usize; 4] {
        [
            self.input_size / 8,
            self.input_size / 4,
            self.input_size / 2,
            self.input_size,
        ]
    }

    pub fn num_foreground(&self) -> usize {
        self.num_classes - 1
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_size < 32 || self.input_size % 32 != 0 {
            return Err(ModelError::BadConfig(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::BadConfig("num_classes < 2".into()));
        }
        if !(0.0..1.0).contains(&self.iou_positive_threshold)
            || self.iou_positive_threshold <= 0.0
        {
            return Err(ModelError::BadConfig(format!(
                "iou_positive_threshold {} outside (0, 1)",
                self.iou_positive_threshold
            )));
        }
        if self.roi_feature_size % 2 != 0 {
            return Err(ModelError::BadConfig(
                "roi_feature_size must be even".into(),
            ));
        }
        let scales = self.depth_scales();
        for pair in scales.windows(2) {
            if pair[1] != pair[0] * 2 {
                return Err(ModelError::BadConfig("depth scales not dyadic".into()));
            }
        }
        Ok(())
    }
}

/// One region proposal in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoI {
    pub bbox: BoxNorm,
    pub score: f64,
}
