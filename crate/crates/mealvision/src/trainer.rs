//! The optimization loop: SGD with momentum and weight decay, a two-phase
//! learning rate, flip augmentation, per-iteration logging, checkpointing
//! and deterministic resume.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::geometry::DepthMap;
use crate::losses::{depth_target_tensor, LossBreakdown, LossConfig};
use crate::model::{
    assign_targets, box_iou, decode_proposals, encode_box, load_checkpoint_file,
    rasterize_mask_target, save_checkpoint_file, BoxNorm, CheckpointError, MealNet, ModelError,
};
use crate::nn::{clip_grad_norm, NodeId, Sgd, Shape, Tensor};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("train split is empty")]
    NoSamples,
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint has no training state")]
    NotATrainingCheckpoint,
    #[error("training state is corrupt: {0}")]
    BadState(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub lr_initial: f64,
    /// Multiplier applied at two thirds of the run.
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint cadence in iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Validation cadence in iterations (0 = never).
    pub validate_every: usize,
    pub flip_augment: bool,
    /// Global gradient-norm clip; keeps the literal summed loss stable at
    /// the fixed initial learning rate.
    pub grad_clip_norm: f64,
    /// RoIs sampled per image for the head losses.
    pub rois_per_image: usize,
    /// Fraction of sampled RoIs that may be positive.
    pub positive_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iterations: 5000,
            lr_initial: 1e-3,
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 2,
            seed: 0,
            checkpoint_every: 1000,
            validate_every: 0,
            flip_augment: true,
            grad_clip_norm: 10.0,
            rois_per_image: 64,
            positive_fraction: 0.25,
        }
    }
}

/// Learning rate as a pure function of the iteration index: the initial
/// rate until two thirds of the run, then dropped by `lr_drop_factor`.
pub fn learning_rate(config: &TrainConfig, iteration: usize) -> f64 {
    let drop_at = config.total_iterations * 2 / 3;
    if iteration < drop_at {
        config.lr_initial
    } else {
        config.lr_initial * config.lr_drop_factor
    }
}

/// Applies independent left-right and up-down flips consistently to every
/// per-pixel and per-box field (and the camera principal point). Flipping
/// twice restores the original sample.
pub fn flip_augment(sample: &Sample, lr: bool, ud: bool) -> Sample {
    let mut out = sample.clone();
    if lr {
        out = out.flip_lr();
    }
    if ud {
        out = out.flip_ud();
    }
    out
}

/// Serializable training-loop state; checkpointing it (plus the optimizer
/// velocity) makes a resumed run reproduce the uninterrupted trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub data_rng: Rng,
    pub aug_rng: Rng,
    pub roi_rng: Rng,
    pub best_validation: Option<BestValidation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestValidation {
    pub iteration: usize,
    pub ap50_percent: f64,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        let root = Rng::seed_from_u64(seed);
        TrainState {
            iteration: 0,
            data_rng: root.fork("data"),
            aug_rng: root.fork("augment"),
            roi_rng: root.fork("roi"),
            best_validation: None,
        }
    }
}

/// RPN anchor-assignment thresholds (standard two-threshold scheme; the
/// stricter 0.7 rule applies to the head RoIs, not the anchors).
const RPN_POSITIVE_IOU: f64 = 0.7;
const RPN_NEGATIVE_IOU: f64 = 0.3;
const RPN_SAMPLES: usize = 128;
const TRAIN_PROPOSALS_KEPT: usize = 128;
const MAX_POSITIVE_ROIS: usize = 12;

/// TEMP-EXPERIMENT toggle
pub static DEPTH_ONLY: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

pub struct Trainer {
    pub net: MealNet<f32>,
    pub config: TrainConfig,
    pub loss_config: LossConfig,
    pub state: TrainState,
    optimizer: Sgd<f32>,
}

impl Trainer {
    pub fn new(net: MealNet<f32>, config: TrainConfig, loss_config: LossConfig) -> Self {
        let optimizer = Sgd::new(&net.store, config.momentum, config.weight_decay);
        let state = TrainState::new(config.seed);
        Trainer {
            net,
            config,
            loss_config,
            state,
            optimizer,
        }
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate(&self.config, self.state.iteration)
    }

    /// Writes model weights, optimizer velocity and loop state to one
    /// archive.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        #[derive(Serialize)]
        struct StateDoc<'a> {
            train_config: &'a TrainConfig,
            loss_config: &'a LossConfig,
            state: &'a TrainState,
        }
        let state_json = serde_json::to_string(&StateDoc {
            train_config: &self.config,
            loss_config: &self.loss_config,
            state: &self.state,
        })
        .expect("state serializes");
        let momentum: Vec<(String, Tensor<f32>)> = self
            .net
            .store
            .iter()
            .map(|(id, name, _, _)| (name.to_string(), self.optimizer.velocity()[id.0].clone()))
            .collect();
        let section = crate::model::checkpoint_section(state_json, momentum);
        save_checkpoint_file(&self.net, Some(&section), path)?;
        Ok(())
    }

    /// Restores a trainer whose next step matches what the saved run would
    /// have done.
    pub fn resume(path: &Path) -> Result<Self, TrainError> {
        #[derive(Deserialize)]
        struct StateDoc {
            train_config: TrainConfig,
            loss_config: LossConfig,
            state: TrainState,
        }
        let (net, section) = load_checkpoint_file(path)?;
        let section = section.ok_or(TrainError::NotATrainingCheckpoint)?;
        let doc: StateDoc = serde_json::from_str(&section.state_json)
            .map_err(|e| TrainError::BadState(e.to_string()))?;
        let mut optimizer = Sgd::new(&net.store, doc.train_config.momentum, doc.train_config.weight_decay);
        for (name, tensor) in section.momentum {
            let id = net
                .store
                .find(&name)
                .ok_or_else(|| TrainError::BadState(format!("unknown momentum entry {name}")))?;
            optimizer.velocity_mut()[id.0] = tensor;
        }
        Ok(Trainer {
            net,
            config: doc.train_config,
            loss_config: doc.loss_config,
            state: doc.state,
            optimizer,
        })
    }

    /// Runs one SGD iteration over a freshly drawn batch and returns the
    /// loss breakdown.
    pub fn step(&mut self, train_set: &[Sample]) -> Result<LossBreakdown, TrainError> {
        if train_set.is_empty() {
            return Err(TrainError::NoSamples);
        }
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let idx = self.state.data_rng.below(train_set.len());
            let sample = &train_set[idx];
            let augmented = if self.config.flip_augment {
                let lr = self.state.aug_rng.chance(0.5);
                let ud = self.state.aug_rng.chance(0.5);
                flip_augment(sample, lr, ud)
            } else {
                sample.clone()
            };
            batch.push(augmented);
        }
        let breakdown = self.train_on_batch(&batch)?;
        if !breakdown.is_finite() {
            return Err(TrainError::Diverged {
                iteration: self.state.iteration,
            });
        }
        self.state.iteration += 1;
        Ok(breakdown)
    }

    fn train_on_batch(&mut self, batch: &[Sample]) -> Result<LossBreakdown, TrainError> {
        use crate::model::{image_to_tensor, stack_batch, ForwardCtx};

        let lr = self.current_lr();
        let cfg = self.net.cfg.clone();
        let mut tape = crate::nn::Tape::new();
        let images: Vec<Tensor<f32>> =
            batch.iter().map(|s| image_to_tensor::<f32>(&s.rgb)).collect();
        let input = tape.leaf(stack_batch(&images));
        let cameras: Vec<_> = batch.iter().map(|s| s.camera).collect();
        let mut ctx = ForwardCtx::new(&mut tape, &self.net.store, true);
        let flow = self.net.forward_flow(&mut ctx, input, &cameras);

        // depth losses at the four scales
        let gts: Vec<&DepthMap> = batch.iter().map(|s| &s.depth_gt).collect();
        let mut depth_nodes = [NodeId(0); 4];
        for (i, &side) in flow.depth_sides.iter().enumerate() {
            let scale = ctx.tape.value(side).shape.h;
            let target = depth_target_tensor::<f32>(&gts, scale);
            depth_nodes[i] = ctx.tape.l1_mean(side, target);
        }

        // RPN losses over sampled anchors, all batch items pooled
        let anchors = self.net.anchors().to_vec();
        let a_per_cell = cfg.anchors_per_cell();
        let mut obj_elem_idx: Vec<(usize, usize)> = Vec::new(); // (level, flat index)
        let mut obj_targets: Vec<f32> = Vec::new();
        let mut box_elem_idx: [Vec<(usize, usize)>; 4] = Default::default();
        let mut box_targets: Vec<[f64; 4]> = Vec::new();
        // flat element offsets of each level map within the tape tensors
        let level_dims: Vec<(usize, usize)> = flow
            .rpn_obj
            .iter()
            .map(|&n| {
                let s = ctx.tape.value(n).shape;
                (s.h, s.w)
            })
            .collect();
        let mut proposals_per_item: Vec<Vec<BoxNorm>> = Vec::with_capacity(batch.len());
        for (item, sample) in batch.iter().enumerate() {
            let gt_boxes: Vec<BoxNorm> = sample
                .instances
                .iter()
                .map(|inst| BoxNorm::from_pixel(&inst.bbox, cfg.input_size))
                .collect();
            // anchor assignment
            let mut max_iou = vec![0.0f64; anchors.len()];
            let mut best_anchor_per_gt = vec![(0usize, 0.0f64); gt_boxes.len()];
            for (a_idx, anchor) in anchors.iter().enumerate() {
                for (g_idx, g) in gt_boxes.iter().enumerate() {
                    let iou = box_iou(&anchor.bbox, g);
                    if iou > max_iou[a_idx] {
                        max_iou[a_idx] = iou;
                    }
                    if iou > best_anchor_per_gt[g_idx].1 {
                        best_anchor_per_gt[g_idx] = (a_idx, iou);
                    }
                }
            }
            let mut positive: Vec<usize> = (0..anchors.len())
                .filter(|&a| max_iou[a] >= RPN_POSITIVE_IOU)
                .collect();
            for &(a_idx, iou) in &best_anchor_per_gt {
                if iou > 0.0 && !positive.contains(&a_idx) {
                    positive.push(a_idx);
                }
            }
            positive.sort_unstable();
            let negatives: Vec<usize> = (0..anchors.len())
                .filter(|&a| max_iou[a] < RPN_NEGATIVE_IOU)
                .collect();
            let n_pos = positive.len().min(RPN_SAMPLES / 2);
            let pos_sample = sample_without_replacement(&positive, n_pos, &mut self.state.roi_rng);
            let n_neg = (RPN_SAMPLES - pos_sample.len()).min(negatives.len());
            let neg_sample = sample_without_replacement(&negatives, n_neg, &mut self.state.roi_rng);

            // per-anchor flat tensor offsets: anchor order is
            // (level, cy, cx, a); objectness layout is (n, a, cy, cx)
            let mut level_starts = [0usize; 4];
            let mut acc_start = 0;
            for (lvl, &(h, w)) in level_dims.iter().enumerate() {
                level_starts[lvl] = acc_start;
                acc_start += h * w * a_per_cell;
            }
            let locate = |a_idx: usize| -> (usize, usize, usize, usize) {
                let anchor = &anchors[a_idx];
                let lvl = anchor.level;
                let within = a_idx - level_starts[lvl];
                let (h, w) = level_dims[lvl];
                let cell = within / a_per_cell;
                let a = within % a_per_cell;
                let cy = cell / w;
                let cx = cell % w;
                let _ = h;
                (lvl, a, cy, cx)
            };
            for &a_idx in pos_sample.iter().chain(&neg_sample) {
                let (lvl, a, cy, cx) = locate(a_idx);
                let (h, w) = level_dims[lvl];
                // Vec per level would complicate order; gather over a level
                // map means flat index within that node's tensor
                obj_elem_idx.push((lvl, ((item * a_per_cell + a) * h + cy) * w + cx));
                obj_targets.push(if max_iou[a_idx] >= RPN_NEGATIVE_IOU || pos_sample.contains(&a_idx) {
                    1.0f32
                } else {
                    0.0f32
                });
            }
            // box regression on positive anchors only
            for &a_idx in &pos_sample {
                let (lvl, a, cy, cx) = locate(a_idx);
                let (h, w) = level_dims[lvl];
                // match to its best gt
                let mut best_g = 0;
                let mut best_iou = -1.0;
                for (g_idx, g) in gt_boxes.iter().enumerate() {
                    let iou = box_iou(&anchors[a_idx].bbox, g);
                    if iou > best_iou {
                        best_iou = iou;
                        best_g = g_idx;
                    }
                }
                let deltas = encode_box(&anchors[a_idx].bbox, &gt_boxes[best_g]);
                for (coord, &d) in deltas.iter().enumerate() {
                    box_elem_idx[coord]
                        .push((lvl, ((item * 4 * a_per_cell + 4 * a + coord) * h + cy) * w + cx));
                    let _ = d;
                }
                box_targets.push(deltas);
            }

            // training proposals for the heads: decoded RPN output plus the
            // ground-truth boxes (detached from the graph)
            let (objectness, deltas) = self.net.read_rpn_outputs(ctx.tape, &flow, item);
            let mut rois: Vec<BoxNorm> = decode_proposals(
                &anchors,
                &objectness,
                &deltas,
                cfg.rpn_proposals,
                cfg.rpn_nms_threshold,
                TRAIN_PROPOSALS_KEPT,
            )
            .into_iter()
            .map(|p| p.bbox)
            .collect();
            rois.extend(gt_boxes.iter().cloned());
            proposals_per_item.push(rois);
        }

        // assemble the RPN loss nodes
        let rpn_obj_node = if obj_elem_idx.is_empty() {
            None
        } else {
            let parts: Vec<NodeId> = Vec::new();
            let _ = parts;
            let mut gathered: Vec<NodeId> = Vec::new();
            for lvl in 0..4 {
                let idx: Vec<usize> = obj_elem_idx
                    .iter()
                    .filter(|(l, _)| *l == lvl)
                    .map(|(_, i)| *i)
                    .collect();
                if !idx.is_empty() {
                    gathered.push(ctx.tape.gather_elems(flow.rpn_obj[lvl], &idx));
                }
            }
            let logits = if gathered.len() == 1 {
                gathered[0]
            } else {
                ctx.tape.concat_rows(&gathered)
            };
            // targets must follow the same level-grouped order
            let mut targets = Vec::new();
            for lvl in 0..4 {
                for ((l, _), &t) in obj_elem_idx.iter().zip(&obj_targets) {
                    if *l == lvl {
                        targets.push(t);
                    }
                }
            }
            let target_tensor =
                Tensor::from_vec(Shape::new(targets.len(), 1, 1, 1), targets);
            Some(ctx.tape.bce_logits(logits, target_tensor, false))
        };
        let rpn_box_node = if box_targets.is_empty() {
            None
        } else {
            // build (P, 4) predictions; rows follow box_targets order, so
            // gather per-coordinate in that order (coordinate-major levels
            // already encode item/cell)
            let mut coord_nodes = Vec::with_capacity(4);
            for coord in 0..4 {
                let mut gathered = Vec::new();
                for lvl in 0..4 {
                    let idx: Vec<usize> = box_elem_idx[coord]
                        .iter()
                        .filter(|(l, _)| *l == lvl)
                        .map(|(_, i)| *i)
                        .collect();
                    if !idx.is_empty() {
                        gathered.push(ctx.tape.gather_elems(flow.rpn_box[lvl], &idx));
                    }
                }
                coord_nodes.push(if gathered.len() == 1 {
                    gathered[0]
                } else {
                    ctx.tape.concat_rows(&gathered)
                });
            }
            let pred = ctx.tape.concat_channels(&coord_nodes);
            // reorder targets the same way (level-grouped within coordinate)
            let mut target_data = Vec::new();
            {
                let mut row_of_level: Vec<usize> = Vec::new();
                for lvl in 0..4 {
                    for (row, (l, _)) in box_elem_idx[0].iter().enumerate() {
                        if *l == lvl {
                            row_of_level.push(row);
                        }
                    }
                }
                for &row in &row_of_level {
                    for coord in 0..4 {
                        target_data.push(box_targets[row][coord] as f32);
                    }
                }
            }
            let n_rows = box_targets.len();
            let target = Tensor::from_vec(Shape::new(n_rows, 4, 1, 1), target_data);
            let sum = ctx.tape.smooth_l1_sum(pred, target, 1.0);
            Some(ctx.tape.scale(sum, 1.0 / n_rows as f32))
        };

        // head RoI sampling per item
        let mut head_rois: Vec<BoxNorm> = Vec::new();
        let mut head_batch_idx: Vec<usize> = Vec::new();
        let mut head_cls_targets: Vec<usize> = Vec::new();
        let mut positive_rows: Vec<usize> = Vec::new();
        let mut positive_info: Vec<(usize, usize, usize)> = Vec::new(); // (row, item, gt index)
        for (item, sample) in batch.iter().enumerate() {
            let gt_boxes: Vec<BoxNorm> = sample
                .instances
                .iter()
                .map(|inst| BoxNorm::from_pixel(&inst.bbox, cfg.input_size))
                .collect();
            let rois = &proposals_per_item[item];
            let assigned = assign_targets(rois, &gt_boxes, cfg.iou_positive_threshold);
            let mut pos: Vec<usize> = (0..rois.len()).filter(|&i| assigned[i].positive).collect();
            let mut neg: Vec<usize> = (0..rois.len()).filter(|&i| !assigned[i].positive).collect();
            let max_pos = ((self.config.rois_per_image as f64 * self.config.positive_fraction)
                as usize)
                .min(MAX_POSITIVE_ROIS);
            pos = sample_without_replacement(&pos, max_pos.min(pos.len()), &mut self.state.roi_rng);
            let n_neg = (self.config.rois_per_image - pos.len()).min(neg.len());
            neg = sample_without_replacement(&neg, n_neg, &mut self.state.roi_rng);
            for &i in &pos {
                let gt_idx = assigned[i].gt_index.expect("positive has a match");
                let row = head_rois.len();
                head_rois.push(rois[i]);
                head_batch_idx.push(item);
                head_cls_targets.push(sample.instances[gt_idx].class_id + 1);
                positive_rows.push(row);
                positive_info.push((row, item, gt_idx));
            }
            for &i in &neg {
                head_rois.push(rois[i]);
                head_batch_idx.push(item);
                head_cls_targets.push(0);
            }
        }

        // recognition head
        let (cls_sum_node, bbox_head_node) = if head_rois.is_empty() {
            (None, None)
        } else {
            let patch7 = self.net.roi_patches(
                &mut ctx,
                &flow.pyramid_aug,
                &head_rois,
                &head_batch_idx,
                cfg.roi_feature_size / 2,
            );
            let (cls_node, box_node) = self.net.head_recognize(&mut ctx, patch7);
            let ce_sum = ctx.tape.softmax_ce_sum(cls_node, &head_cls_targets);
            let ce = ctx
                .tape
                .scale(ce_sum, 1.0 / head_cls_targets.len() as f32);
            // class-specific box refinement on positives
            let bbox = if positive_info.is_empty() {
                None
            } else {
                let classes = cfg.num_classes;
                let mut coord_nodes = Vec::with_capacity(4);
                for coord in 0..4 {
                    let idx: Vec<usize> = positive_info
                        .iter()
                        .map(|&(row, _, _)| {
                            let class = head_cls_targets[row];
                            (row * 4 * classes) + 4 * class + coord
                        })
                        .collect();
                    coord_nodes.push(ctx.tape.gather_elems(box_node, &idx));
                }
                let pred = ctx.tape.concat_channels(&coord_nodes);
                let mut target_data = Vec::new();
                for &(row, item, gt_idx) in &positive_info {
                    let deltas = encode_box(
                        &head_rois[row],
                        &BoxNorm::from_pixel(&batch[item].instances[gt_idx].bbox, cfg.input_size),
                    );
                    target_data.extend(deltas.iter().map(|&d| d as f32));
                }
                let target = Tensor::from_vec(
                    Shape::new(positive_info.len(), 4, 1, 1),
                    target_data,
                );
                let sum = ctx.tape.smooth_l1_sum(pred, target, 1.0);
                Some(ctx.tape.scale(sum, 1.0 / positive_info.len() as f32))
            };
            (Some(ce), bbox)
        };

        // mask and volume heads on positive RoIs only
        let (mask_node, vol_node) = if positive_info.is_empty() {
            (None, None)
        } else {
            let pos_boxes: Vec<BoxNorm> =
                positive_rows.iter().map(|&r| head_rois[r]).collect();
            let pos_items: Vec<usize> =
                positive_rows.iter().map(|&r| head_batch_idx[r]).collect();
            let patch = self.net.roi_patches(
                &mut ctx,
                &flow.pyramid_aug,
                &pos_boxes,
                &pos_items,
                cfg.roi_feature_size,
            );
            let mask_logits = self.net.head_mask(&mut ctx, patch);
            let target_channels: Vec<usize> = positive_rows
                .iter()
                .map(|&r| head_cls_targets[r])
                .collect();
            let selected = ctx.tape.gather_channel(mask_logits, &target_channels);
            let mut mask_target_data =
                Vec::with_capacity(positive_info.len() * cfg.mask_size * cfg.mask_size);
            for (pos, &(row, item, gt_idx)) in positive_info.iter().enumerate() {
                let _ = pos;
                let grid = rasterize_mask_target(
                    &batch[item].instances[gt_idx].mask,
                    &head_rois[row],
                    cfg.mask_size,
                );
                mask_target_data.extend(grid.iter().map(|&v| v as f32));
            }
            let mask_target = Tensor::from_vec(
                Shape::new(positive_info.len(), 1, cfg.mask_size, cfg.mask_size),
                mask_target_data,
            );
            let mask_sum = ctx.tape.bce_logits(selected, mask_target, true);
            let mask_loss = ctx
                .tape
                .scale(mask_sum, 1.0 / positive_info.len() as f32);

            let mask_prob = ctx.tape.sigmoid(selected);
            let mask_small = ctx.tape.avg_pool(mask_prob, 2);
            let volumes = self.net.head_volume(&mut ctx, patch, mask_small);
            let v_star: Vec<f32> = positive_info
                .iter()
                .map(|&(_, item, gt_idx)| {
                    (batch[item].instances[gt_idx].volume_ml / 1000.0) as f32
                })
                .collect();
            let vol_sum = ctx.tape.volume_loss_sum(
                volumes,
                &v_star,
                self.loss_config.alpha,
                self.loss_config.epsilon_vol,
            );
            let vol_loss = ctx.tape.scale(vol_sum, 1.0 / positive_info.len() as f32);
            (Some(mask_loss), Some(vol_loss))
        };

        // classification bucket carries the head cross-entropy plus the RPN
        // objectness; box bucket likewise
        let cls_parts: Vec<NodeId> = [cls_sum_node, rpn_obj_node].into_iter().flatten().collect();
        let cls_node = ctx.tape.sum_scalars(&cls_parts);
        let bbox_parts: Vec<NodeId> =
            [bbox_head_node, rpn_box_node].into_iter().flatten().collect();
        let bbox_node = ctx.tape.sum_scalars(&bbox_parts);
        let mask_total = mask_node.map_or_else(
            || ctx.tape.sum_scalars(&[]),
            |n| n,
        );
        let vol_total = vol_node.map_or_else(|| ctx.tape.sum_scalars(&[]), |n| n);
        let mut total_parts = depth_nodes.to_vec();
        if !DEPTH_ONLY.load(std::sync::atomic::Ordering::Relaxed) {
            total_parts.extend([cls_node, bbox_node, mask_total, vol_total]);
        }
        let total_node = ctx.tape.sum_scalars(&total_parts);

        let breakdown = LossBreakdown {
            depth: [
                ctx.tape.value(depth_nodes[0]).item() as f64,
                ctx.tape.value(depth_nodes[1]).item() as f64,
                ctx.tape.value(depth_nodes[2]).item() as f64,
                ctx.tape.value(depth_nodes[3]).item() as f64,
            ],
            cls: ctx.tape.value(cls_node).item() as f64,
            bbox: ctx.tape.value(bbox_node).item() as f64,
            mask: ctx.tape.value(mask_total).item() as f64,
            vol: ctx.tape.value(vol_total).item() as f64,
            total: ctx.tape.value(total_node).item() as f64,
        };
        if !breakdown.is_finite() {
            return Ok(breakdown); // caller raises Diverged with the iteration
        }

        let bn_updates = std::mem::take(&mut ctx.bn_updates);
        let grads = tape.backward(total_node);
        let mut param_grads = tape.param_grads(&grads, &self.net.store);
        clip_grad_norm(&mut param_grads, self.config.grad_clip_norm);
        self.optimizer.step(&mut self.net.store, &param_grads, lr);
        self.net.absorb_bn_updates(bn_updates);
        Ok(breakdown)
    }
}

fn sample_without_replacement(pool: &[usize], count: usize, rng: &mut Rng) -> Vec<usize> {
    if count >= pool.len() {
        return pool.to_vec();
    }
    let mut indices: Vec<usize> = pool.to_vec();
    rng.shuffle(&mut indices);
    indices.truncate(count);
    indices.sort_unstable();
    indices
}

/// One line of the structured training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Outcome of a full training run.
pub struct TrainSummary {
    pub iterations_run: usize,
    pub final_loss: Option<LossBreakdown>,
    pub wall_seconds: f64,
    pub best_validation: Option<BestValidation>,
}

/// Runs the loop to `total_iterations`, writing one loss record per
/// iteration to `log` and wall-clock timings to `timing_log`, checkpointing
/// on cadence into `checkpoint_path`.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    trainer: &mut Trainer,
    train_set: &[Sample],
    val_set: &[Sample],
    log: &mut dyn Write,
    timing_log: &mut dyn Write,
    checkpoint_path: Option<&Path>,
    mut on_validate: impl FnMut(&MealNet<f32>, &[Sample]) -> Option<f64>,
) -> Result<TrainSummary, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let started = std::time::Instant::now();
    let mut final_loss = None;
    while trainer.state.iteration < trainer.config.total_iterations {
        let iter_start = std::time::Instant::now();
        let lr = trainer.current_lr();
        let iteration = trainer.state.iteration;
        let losses = trainer.step(train_set)?;
        let record = LogRecord {
            iteration,
            lr,
            losses: losses.clone(),
        };
        serde_json::to_writer(&mut *log, &record).map_err(std::io::Error::other)?;
        log.write_all(b"\n")?;
        writeln!(
            timing_log,
            "{{\"iteration\":{},\"wall_ms\":{:.3}}}",
            iteration,
            iter_start.elapsed().as_secs_f64() * 1000.0
        )?;
        final_loss = Some(losses);

        let done = trainer.state.iteration;
        if trainer.config.validate_every > 0
            && done % trainer.config.validate_every == 0
            && !val_set.is_empty()
        {
            if let Some(ap50) = on_validate(&trainer.net, val_set) {
                let better = trainer
                    .state
                    .best_validation
                    .as_ref()
                    .map_or(true, |b| ap50 > b.ap50_percent);
                if better {
                    trainer.state.best_validation = Some(BestValidation {
                        iteration: done,
                        ap50_percent: ap50,
                    });
                }
            }
        }
        if let Some(path) = checkpoint_path {
            let cadence = trainer.config.checkpoint_every;
            if (cadence > 0 && done % cadence == 0)
                || done == trainer.config.total_iterations
            {
                trainer.save(path)?;
            }
        }
    }
    Ok(TrainSummary {
        iterations_run: trainer.state.iteration,
        final_loss,
        wall_seconds: started.elapsed().as_secs_f64(),
        best_validation: trainer.state.best_validation.clone(),
    })
}


#[cfg(test)]
mod bench {
    use super::*;
    use crate::dataset::{generate_scene, PoseTag, SceneConfig};
    use crate::model::ModelConfig;

    #[test]
    #[ignore]
    fn desk_step_timing() {
        let scfg = SceneConfig::default();
        let t0 = std::time::Instant::now();
        let samples: Vec<Sample> = (0..2u64)
            .map(|s| generate_scene(s, PoseTag::Fixed90, &scfg).unwrap())
            .collect();
        println!("scene generation: {:.2}s for 2 scenes", t0.elapsed().as_secs_f64());
        let net = MealNet::<f32>::new(ModelConfig::desk(), 0).unwrap();
        println!("params: {:.2}M", net.store.numel() as f64 / 1e6);
        let config = TrainConfig {
            total_iterations: 10,
            batch_size: 1,
            seed: 0,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(net, config, LossConfig::default());
        let t1 = std::time::Instant::now();
        for i in 0..6 {
            let t2 = std::time::Instant::now();
            let l = trainer.step(&samples).unwrap();
            println!("iter {i}: {:.3}s total={:.2}", t2.elapsed().as_secs_f64(), l.total);
        }
        println!("mean: {:.3}s/iter", t1.elapsed().as_secs_f64() / 6.0);
        // inference timing
        let t3 = std::time::Instant::now();
        let (_, dur) = trainer.net.forward_infer(&samples[0].rgb, &samples[0].camera).unwrap();
        println!("infer: {:.3}s (reported {:.3}s)", t3.elapsed().as_secs_f64(), dur.as_secs_f64());
    }
}
