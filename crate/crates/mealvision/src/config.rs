//! Run configuration: a flat, human-readable key-value document with
//! defaults for every field, strict unknown-key rejection, and command-line
//! overrides. The fully resolved document is echoed into every output
//! directory.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::dataset::SceneConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: malformed entry '{text}' (expected key = value)")]
    Malformed { line: usize, text: String },
    #[error("line {line}: bad value for '{key}': {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Merged configuration for all pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    /// Preset for the small overfit experiment: batch 1, shorter run.
    pub fn overfit_preset() -> Self {
        let mut cfg = RunConfig::default();
        cfg.train.total_iterations = 3000;
        cfg.train.batch_size = 1;
        cfg.train.checkpoint_every = 1000;
        cfg
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::BadValue {
            line,
            key: key.to_string(),
            reason,
        };
        macro_rules! parse {
            ($t:ty) => {
                value
                    .parse::<$t>()
                    .map_err(|e| bad(e.to_string()))?
            };
        }
        let parse_list = |v: &str| -> Result<Vec<f64>, ConfigError> {
            v.split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect()
        };
        match key {
            "scene.resolution" => self.scene.resolution = parse!(usize),
            "scene.min_instances" => self.scene.min_instances = parse!(usize),
            "scene.max_instances" => self.scene.max_instances = parse!(usize),
            "scene.color_jitter" => self.scene.color_jitter = parse!(f64),
            "scene.texture_noise" => self.scene.texture_noise = parse!(f64),
            "scene.plate_radius_min" => self.scene.plate_radius_range.0 = parse!(f64),
            "scene.plate_radius_max" => self.scene.plate_radius_range.1 = parse!(f64),
            "model.input_size" => self.model.input_size = parse!(usize),
            "model.num_classes" => self.model.num_classes = parse!(usize),
            "model.backbone_channels" => self.model.backbone_channels = parse!(usize),
            "model.stage_channels" => {
                let list = parse_list(value)?;
                if list.len() != 4 {
                    return Err(bad("expected 4 comma-separated widths".into()));
                }
                for (i, v) in list.iter().enumerate() {
                    self.model.stage_channels[i] = *v as usize;
                }
            }
            "model.blocks_per_stage" => self.model.blocks_per_stage = parse!(usize),
            "model.depth_decoder_channels" => self.model.depth_decoder_channels = parse!(usize),
            "model.volume_head_width" => self.model.volume_head_width = parse!(usize),
            "model.iou_positive_threshold" => self.model.iou_positive_threshold = parse!(f64),
            "model.rpn_proposals" => self.model.rpn_proposals = parse!(usize),
            "model.kept_candidates" => self.model.kept_candidates = parse!(usize),
            "model.anchor_scales" => self.model.anchor_scales = parse_list(value)?,
            "model.anchor_aspect_ratios" => self.model.anchor_aspect_ratios = parse_list(value)?,
            "model.rpn_nms_threshold" => self.model.rpn_nms_threshold = parse!(f64),
            "model.detection_nms_threshold" => self.model.detection_nms_threshold = parse!(f64),
            "model.detection_score_threshold" => {
                self.model.detection_score_threshold = parse!(f64)
            }
            "model.roi_feature_size" => self.model.roi_feature_size = parse!(usize),
            "model.mask_size" => self.model.mask_size = parse!(usize),
            "model.camera.fx" => self.model.camera.fx = parse!(f64),
            "model.camera.fy" => self.model.camera.fy = parse!(f64),
            "model.camera.cx" => self.model.camera.cx = parse!(f64),
            "model.camera.cy" => self.model.camera.cy = parse!(f64),
            "train.total_iterations" => self.train.total_iterations = parse!(usize),
            "train.lr_initial" => self.train.lr_initial = parse!(f64),
            "train.lr_drop_factor" => self.train.lr_drop_factor = parse!(f64),
            "train.momentum" => self.train.momentum = parse!(f64),
            "train.weight_decay" => self.train.weight_decay = parse!(f64),
            "train.batch_size" => self.train.batch_size = parse!(usize),
            "train.seed" => self.train.seed = parse!(u64),
            "train.checkpoint_every" => self.train.checkpoint_every = parse!(usize),
            "train.validate_every" => self.train.validate_every = parse!(usize),
            "train.flip_augment" => self.train.flip_augment = parse!(bool),
            "train.grad_clip_norm" => self.train.grad_clip_norm = parse!(f64),
            "train.rois_per_image" => self.train.rois_per_image = parse!(usize),
            "train.positive_fraction" => self.train.positive_fraction = parse!(f64),
            "loss.alpha" => self.loss.alpha = parse!(f64),
            "loss.epsilon_vol" => self.loss.epsilon_vol = parse!(f64),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parses a document of `key = value` lines over the defaults. `#`
    /// starts a comment; blank lines are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: content.to_string(),
                });
            };
            cfg.set(key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.finish()?;
        Ok(cfg)
    }

    /// Cross-field resolution and validation. The scene generator shares
    /// the model's camera.
    pub fn finish(&mut self) -> Result<(), ConfigError> {
        self.scene.camera = self.model.camera;
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.input_size != self.scene.resolution {
            return Err(ConfigError::Invalid(format!(
                "model.input_size {} != scene.resolution {}",
                self.model.input_size, self.scene.resolution
            )));
        }
        if self.train.total_iterations == 0 {
            return Err(ConfigError::Invalid("train.total_iterations is 0".into()));
        }
        if self.train.lr_initial <= 0.0 {
            return Err(ConfigError::Invalid("train.lr_initial must be > 0".into()));
        }
        if self.loss.alpha < 0.0 || self.loss.epsilon_vol <= 0.0 {
            return Err(ConfigError::Invalid(
                "loss.alpha must be >= 0 and loss.epsilon_vol > 0".into(),
            ));
        }
        Ok(())
    }

    /// Fully resolved flat document, suitable for echoing into run outputs
    /// and for re-parsing.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        let list =
            |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "scene.resolution = {}", self.scene.resolution);
        let _ = writeln!(s, "scene.min_instances = {}", self.scene.min_instances);
        let _ = writeln!(s, "scene.max_instances = {}", self.scene.max_instances);
        let _ = writeln!(s, "scene.color_jitter = {}", self.scene.color_jitter);
        let _ = writeln!(s, "scene.texture_noise = {}", self.scene.texture_noise);
        let _ = writeln!(s, "scene.plate_radius_min = {}", self.scene.plate_radius_range.0);
        let _ = writeln!(s, "scene.plate_radius_max = {}", self.scene.plate_radius_range.1);
        let _ = writeln!(s, "model.input_size = {}", self.model.input_size);
        let _ = writeln!(s, "model.num_classes = {}", self.model.num_classes);
        let _ = writeln!(s, "model.backbone_channels = {}", self.model.backbone_channels);
        let _ = writeln!(
            s,
            "model.stage_channels = {}",
            self.model
                .stage_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "model.blocks_per_stage = {}", self.model.blocks_per_stage);
        let _ = writeln!(
            s,
            "model.depth_decoder_channels = {}",
            self.model.depth_decoder_channels
        );
        let _ = writeln!(s, "model.volume_head_width = {}", self.model.volume_head_width);
        let _ = writeln!(
            s,
            "model.iou_positive_threshold = {}",
            self.model.iou_positive_threshold
        );
        let _ = writeln!(s, "model.rpn_proposals = {}", self.model.rpn_proposals);
        let _ = writeln!(s, "model.kept_candidates = {}", self.model.kept_candidates);
        let _ = writeln!(s, "model.anchor_scales = {}", list(&self.model.anchor_scales));
        let _ = writeln!(
            s,
            "model.anchor_aspect_ratios = {}",
            list(&self.model.anchor_aspect_ratios)
        );
        let _ = writeln!(s, "model.rpn_nms_threshold = {}", self.model.rpn_nms_threshold);
        let _ = writeln!(
            s,
            "model.detection_nms_threshold = {}",
            self.model.detection_nms_threshold
        );
        let _ = writeln!(
            s,
            "model.detection_score_threshold = {}",
            self.model.detection_score_threshold
        );
        let _ = writeln!(s, "model.roi_feature_size = {}", self.model.roi_feature_size);
        let _ = writeln!(s, "model.mask_size = {}", self.model.mask_size);
        let _ = writeln!(s, "model.camera.fx = {}", self.model.camera.fx);
        let _ = writeln!(s, "model.camera.fy = {}", self.model.camera.fy);
        let _ = writeln!(s, "model.camera.cx = {}", self.model.camera.cx);
        let _ = writeln!(s, "model.camera.cy = {}", self.model.camera.cy);
        let _ = writeln!(s, "train.total_iterations = {}", self.train.total_iterations);
        let _ = writeln!(s, "train.lr_initial = {}", self.train.lr_initial);
        let _ = writeln!(s, "train.lr_drop_factor = {}", self.train.lr_drop_factor);
        let _ = writeln!(s, "train.momentum = {}", self.train.momentum);
        let _ = writeln!(s, "train.weight_decay = {}", self.train.weight_decay);
        let _ = writeln!(s, "train.batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "train.seed = {}", self.train.seed);
        let _ = writeln!(s, "train.checkpoint_every = {}", self.train.checkpoint_every);
        let _ = writeln!(s, "train.validate_every = {}", self.train.validate_every);
        let _ = writeln!(s, "train.flip_augment = {}", self.train.flip_augment);
        let _ = writeln!(s, "train.grad_clip_norm = {}", self.train.grad_clip_norm);
        let _ = writeln!(s, "train.rois_per_image = {}", self.train.rois_per_image);
        let _ = writeln!(s, "train.positive_fraction = {}", self.train.positive_fraction);
        let _ = writeln!(s, "loss.alpha = {}", self.loss.alpha);
        let _ = writeln!(s, "loss.epsilon_vol = {}", self.loss.epsilon_vol);
        s
    }
}
