//! Single-image inference: proposals, per-class refinement and suppression,
//! mask pasting and volume readout.

use std::time::{Duration, Instant};

use super::layers::ForwardCtx;
use super::net::{image_to_tensor, MealNet};
use super::rpn::{decode_proposals, nms, sort_by_score_desc};
use super::targets::{decode_box, BoxNorm};
use super::ModelError;
use crate::dataset::{BBox, Rgb8Image};
use crate::geometry::{back_project, CameraIntrinsics, DepthMap, PointCloud};
use crate::mask::Mask;
use crate::nn::{Scalar, Tape};

/// One predicted food item.
#[derive(Debug, Clone)]
pub struct Detection {
    /// Dataset class id (0-based, foreground only).
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    pub mask: Mask,
    pub volume_ml: f64,
}

/// Per-image predictions.
pub struct NetworkOutputs {
    /// Four depth maps, smallest to largest scale.
    pub depth_predictions: Vec<DepthMap>,
    /// Back-projection of the largest depth scale.
    pub point_cloud: PointCloud,
    pub detections: Vec<Detection>,
}

/// Upsamples a mask-probability grid into the box rectangle and thresholds
/// at 0.5; everything outside the box stays empty.
pub fn paste_mask(
    grid: &[f64],
    grid_size: usize,
    bbox: &BoxNorm,
    image_size: usize,
) -> Mask {
    let mut mask = Mask::zeros(image_size, image_size);
    let s = image_size as f64;
    let x_lo = ((bbox.x0 * s).floor().max(0.0)) as usize;
    let y_lo = ((bbox.y0 * s).floor().max(0.0)) as usize;
    let x_hi = ((bbox.x1 * s).ceil().min(s)) as usize;
    let y_hi = ((bbox.y1 * s).ceil().min(s)) as usize;
    let (bw, bh) = (bbox.width(), bbox.height());
    if bw <= 0.0 || bh <= 0.0 {
        return mask;
    }
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let u = ((x as f64 + 0.5) / s - bbox.x0) / bw;
            let v = ((y as f64 + 0.5) / s - bbox.y0) / bh;
            if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                continue;
            }
            let fx = (u * grid_size as f64 - 0.5).clamp(0.0, (grid_size - 1) as f64);
            let fy = (v * grid_size as f64 - 0.5).clamp(0.0, (grid_size - 1) as f64);
            let x0 = (fx.floor() as usize).min(grid_size - 2);
            let y0 = (fy.floor() as usize).min(grid_size - 2);
            let (lx, ly) = (fx - x0 as f64, fy - y0 as f64);
            let g = |xx: usize, yy: usize| grid[yy * grid_size + xx];
            let p = g(x0, y0) * (1.0 - lx) * (1.0 - ly)
                + g(x0 + 1, y0) * lx * (1.0 - ly)
                + g(x0, y0 + 1) * (1.0 - lx) * ly
                + g(x0 + 1, y0 + 1) * lx * ly;
            if p >= 0.5 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

impl<S: Scalar> MealNet<S> {
    /// Runs the full pipeline on one RGB image. Returns the outputs plus the
    /// wall-clock inference time.
    pub fn forward_infer(
        &self,
        rgb: &Rgb8Image,
        camera: &CameraIntrinsics,
    ) -> Result<(NetworkOutputs, Duration), ModelError> {
        let start = Instant::now();
        if rgb.width != self.cfg.input_size || rgb.height != self.cfg.input_size {
            return Err(ModelError::BadInput {
                got_w: rgb.width,
                got_h: rgb.height,
                expect: self.cfg.input_size,
            });
        }
        let mut tape = Tape::new();
        let input = tape.leaf(image_to_tensor::<S>(rgb));
        let mut ctx = ForwardCtx::new(&mut tape, &self.store, false);
        let flow = self.forward_flow(&mut ctx, input, &[*camera]);

        let (objectness, deltas) = self.read_rpn_outputs(ctx.tape, &flow, 0);
        let proposals = decode_proposals(
            self.anchors(),
            &objectness,
            &deltas,
            self.cfg.rpn_proposals,
            self.cfg.rpn_nms_threshold,
            self.cfg.kept_candidates,
        );

        let mut detections = Vec::new();
        if !proposals.is_empty() {
            let boxes: Vec<BoxNorm> = proposals.iter().map(|p| p.bbox).collect();
            let batch_idx = vec![0usize; boxes.len()];
            let patch7 = self.roi_patches(
                &mut ctx,
                &flow.pyramid_aug,
                &boxes,
                &batch_idx,
                self.cfg.roi_feature_size / 2,
            );
            let (cls_node, box_node) = self.head_recognize(&mut ctx, patch7);
            let logits = ctx.tape.value(cls_node).clone();
            let box_deltas = ctx.tape.value(box_node).clone();
            let classes = self.cfg.num_classes;

            // per-proposal class decision and box refinement
            struct Candidate {
                class_fg: usize,
                score: f64,
                bbox: BoxNorm,
            }
            let mut candidates = Vec::new();
            for (p, roi) in boxes.iter().enumerate() {
                let row: Vec<f64> =
                    (0..classes).map(|c| logits.at(p, c, 0, 0).to_f64()).collect();
                let max = row.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                let mut best_c = 0;
                for c in 1..classes {
                    if row[c] > row[best_c] {
                        best_c = c;
                    }
                }
                if best_c == 0 {
                    continue; // background
                }
                let score = exps[best_c] / denom;
                if score < self.cfg.detection_score_threshold {
                    continue;
                }
                let d = [
                    box_deltas.at(p, 4 * best_c, 0, 0).to_f64(),
                    box_deltas.at(p, 4 * best_c + 1, 0, 0).to_f64(),
                    box_deltas.at(p, 4 * best_c + 2, 0, 0).to_f64(),
                    box_deltas.at(p, 4 * best_c + 3, 0, 0).to_f64(),
                ];
                let refined = decode_box(roi, &d).clamp_unit();
                if !refined.is_valid() || refined.area() < 1e-6 {
                    continue;
                }
                candidates.push(Candidate {
                    class_fg: best_c - 1,
                    score,
                    bbox: refined,
                });
            }

            // per-class NMS, then global cap at kept_candidates
            let mut kept: Vec<usize> = Vec::new();
            for class in 0..self.cfg.num_foreground() {
                let member_idx: Vec<usize> = (0..candidates.len())
                    .filter(|&i| candidates[i].class_fg == class)
                    .collect();
                let scores: Vec<f64> = member_idx.iter().map(|&i| candidates[i].score).collect();
                let order = sort_by_score_desc(&scores);
                let sorted_boxes: Vec<BoxNorm> =
                    order.iter().map(|&o| candidates[member_idx[o]].bbox).collect();
                for k in nms(&sorted_boxes, self.cfg.detection_nms_threshold) {
                    kept.push(member_idx[order[k]]);
                }
            }
            let kept_scores: Vec<f64> = kept.iter().map(|&i| candidates[i].score).collect();
            let final_order = sort_by_score_desc(&kept_scores);
            let final_idx: Vec<usize> = final_order
                .iter()
                .take(self.cfg.kept_candidates)
                .map(|&o| kept[o])
                .collect();

            if !final_idx.is_empty() {
                let det_boxes: Vec<BoxNorm> =
                    final_idx.iter().map(|&i| candidates[i].bbox).collect();
                let det_batch = vec![0usize; det_boxes.len()];
                let patch = self.roi_patches(
                    &mut ctx,
                    &flow.pyramid_aug,
                    &det_boxes,
                    &det_batch,
                    self.cfg.roi_feature_size,
                );
                let mask_logits = self.head_mask(&mut ctx, patch);
                let mask_channels: Vec<usize> = final_idx
                    .iter()
                    .map(|&i| candidates[i].class_fg + 1)
                    .collect();
                let selected = ctx.tape.gather_channel(mask_logits, &mask_channels);
                let mask_prob = ctx.tape.sigmoid(selected);
                let mask_small = ctx.tape.avg_pool(mask_prob, 2);
                let volume_node = self.head_volume(&mut ctx, patch, mask_small);

                let probs = ctx.tape.value(mask_prob).clone();
                let volumes = ctx.tape.value(volume_node).clone();
                let ms = self.cfg.mask_size;
                let s_img = self.cfg.input_size;
                for (row, &i) in final_idx.iter().enumerate() {
                    let c = &candidates[i];
                    let grid: Vec<f64> = (0..ms * ms)
                        .map(|g| probs.at(row, 0, g / ms, g % ms).to_f64())
                        .collect();
                    let mask = paste_mask(&grid, ms, &c.bbox, s_img);
                    let liters = volumes.at(row, 0, 0, 0).to_f64();
                    detections.push(Detection {
                        class_id: c.class_fg,
                        score: c.score,
                        bbox: BBox {
                            x_min: (c.bbox.x0 * s_img as f64).floor().max(0.0) as usize,
                            y_min: (c.bbox.y0 * s_img as f64).floor().max(0.0) as usize,
                            x_max: ((c.bbox.x1 * s_img as f64).ceil() as usize).min(s_img),
                            y_max: ((c.bbox.y1 * s_img as f64).ceil() as usize).min(s_img),
                        },
                        mask,
                        volume_ml: (liters * 1000.0).max(0.0),
                    });
                }
            }
        }

        let scales = self.cfg.depth_scales();
        let mut depth_predictions = Vec::with_capacity(4);
        for (i, &side) in flow.depth_sides.iter().enumerate() {
            let v = tape.value(side);
            let values: Vec<f64> = v.data.iter().map(|d| d.to_f64()).collect();
            depth_predictions.push(
                DepthMap::new(scales[i], scales[i], values).expect("side shape"),
            );
        }
        let point_cloud = back_project(&depth_predictions[3], camera);
        let outputs = NetworkOutputs {
            depth_predictions,
            point_cloud,
            detections,
        };
        Ok((outputs, start.elapsed()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn untrained_inference_has_pipeline_shape() {
        let cfg = ModelConfig::tiny(64);
        let net = MealNet::<f32>::new(cfg.clone(), 11).unwrap();
        let mut rng = crate::rng::Rng::seed_from_u64(2);
        let mut rgb = Rgb8Image::new(64, 64);
        for b in rgb.data.iter_mut() {
            *b = rng.below(256) as u8;
        }
        let k = CameraIntrinsics::default();
        let (out, elapsed) = net.forward_infer(&rgb, &k).unwrap();
        assert_eq!(out.depth_predictions.len(), 4);
        assert!(out.detections.len() <= cfg.kept_candidates);
        for d in &out.depth_predictions {
            assert!(d.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // z channel of the cloud equals the largest depth map exactly
        let largest = &out.depth_predictions[3];
        for y in 0..largest.height() {
            for x in 0..largest.width() {
                assert_eq!(out.point_cloud.get(x, y)[2], largest.get(x, y));
            }
        }
        assert!(elapsed.as_secs_f64() > 0.0);
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = ModelConfig::tiny(64);
        let net = MealNet::<f32>::new(cfg, 3).unwrap();
        let mut rng = crate::rng::Rng::seed_from_u64(8);
        let mut rgb = Rgb8Image::new(64, 64);
        for b in rgb.data.iter_mut() {
            *b = rng.below(256) as u8;
        }
        let k = CameraIntrinsics::default();
        let (a, _) = net.forward_infer(&rgb, &k).unwrap();
        let (b, _) = net.forward_infer(&rgb, &k).unwrap();
        assert_eq!(a.depth_predictions[3], b.depth_predictions[3]);
        assert_eq!(a.detections.len(), b.detections.len());
        for (da, db) in a.detections.iter().zip(&b.detections) {
            assert_eq!(da.class_id, db.class_id);
            assert_eq!(da.score.to_bits(), db.score.to_bits());
            assert_eq!(da.mask, db.mask);
            assert_eq!(da.volume_ml.to_bits(), db.volume_ml.to_bits());
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let net = MealNet::<f32>::new(ModelConfig::tiny(64), 0).unwrap();
        let rgb = Rgb8Image::new(48, 64);
        assert!(matches!(
            net.forward_infer(&rgb, &CameraIntrinsics::default()),
            Err(ModelError::BadInput { .. })
        ));
    }

    #[test]
    fn pasted_mask_stays_inside_box() {
        let grid = vec![1.0; 28 * 28];
        let bbox = BoxNorm {
            x0: 0.25,
            y0: 0.375,
            x1: 0.625,
            y1: 0.75,
        };
        let mask = paste_mask(&grid, 28, &bbox, 64);
        let (x0, y0, x1, y1) = mask.bbox().unwrap();
        assert!(x0 >= 16 && y0 >= 24 && x1 <= 40 && y1 <= 48);
        assert!(mask.area() > 0);
    }
}
