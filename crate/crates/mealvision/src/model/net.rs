//! Network construction and the forward pass building blocks.

use super::layers::{apply_bn_updates, BnUpdate, Conv, Deconv, Dense, ForwardCtx, Norm};
use super::rpn::{generate_anchors, Anchor};
use super::targets::BoxNorm;
use super::{ModelConfig, ModelError};
use crate::dataset::Rgb8Image;
use crate::geometry::CameraIntrinsics;
use crate::nn::{NodeId, ParamStore, Scalar, Shape, Tape, Tensor};
use crate::rng::Rng;

struct ResBlock {
    conv1: Conv,
    bn1: Norm,
    conv2: Conv,
    bn2: Norm,
    down: Option<(Conv, Norm)>,
}

/// Nodes produced by the shared part of the pipeline (backbone, depth
/// branch, point cloud, cloud-augmented pyramid, RPN maps).
pub struct FlowNodes {
    /// P2..P5, uniform width, strides 4..32.
    pub pyramid: [NodeId; 4],
    /// Depth side predictions, smallest to largest, each (N, 1, s, s).
    pub depth_sides: [NodeId; 4],
    /// Point cloud from the largest depth scale, (N, 3, S, S).
    pub cloud: NodeId,
    /// Pyramid with the pooled cloud channels appended (width + 3).
    pub pyramid_aug: [NodeId; 4],
    /// Per-level RPN objectness logits, (N, A, h, w).
    pub rpn_obj: Vec<NodeId>,
    /// Per-level RPN box deltas, (N, 4A, h, w).
    pub rpn_box: Vec<NodeId>,
}

/// The multi-task network. One instance owns all parameters; forward passes
/// append to a caller-provided tape so training and inference can share the
/// same building blocks.
pub struct MealNet<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    stem_conv1: Conv,
    stem_bn1: Norm,
    stem_conv2: Conv,
    stem_bn2: Norm,
    stages: Vec<Vec<ResBlock>>,
    laterals: Vec<Conv>,
    smooths: Vec<Conv>,
    dec_in: Conv,
    dec_in_bn: Norm,
    dec_deconvs: Vec<Deconv>,
    dec_bns: Vec<Norm>,
    dec_skips: Vec<Conv>,
    dec_sides: Vec<Conv>,
    rpn_conv: Conv,
    rpn_obj: Conv,
    rpn_box: Conv,
    reco_fc: Dense,
    reco_cls: Dense,
    reco_box: Dense,
    mask_conv1: Conv,
    mask_bn1: Norm,
    mask_conv2: Conv,
    mask_bn2: Norm,
    mask_deconv: Deconv,
    mask_out: Conv,
    vol_conv1: Conv,
    vol_bn1: Norm,
    vol_conv2: Conv,
    vol_bn2: Norm,
    vol_fc: Dense,
    anchors: Vec<Anchor>,
}

impl<S: Scalar> MealNet<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(seed).fork("init");
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let c = cfg.stage_channels;
        let f = cfg.backbone_channels;
        let d = cfg.depth_decoder_channels;
        let mask_w = (f / 2).max(8);
        let aug = f + 3;
        let a_per_cell = cfg.anchors_per_cell();

        let stem_conv1 = Conv::new(s, r, "backbone.stem.conv1", 3, c[0], 3, 2, 1, false);
        let stem_bn1 = Norm::new(s, "backbone.stem.bn1", c[0]);
        let stem_conv2 = Conv::new(s, r, "backbone.stem.conv2", c[0], c[0], 3, 2, 1, false);
        let stem_bn2 = Norm::new(s, "backbone.stem.bn2", c[0]);

        let mut stages = Vec::new();
        for (i, &width) in c.iter().enumerate() {
            let mut blocks = Vec::new();
            let in_w = if i == 0 { c[0] } else { c[i - 1] };
            for b in 0..cfg.blocks_per_stage {
                let name = format!("backbone.stage{i}.block{b}");
                let (block_in, stride) = if b == 0 {
                    (in_w, if i == 0 { 1 } else { 2 })
                } else {
                    (width, 1)
                };
                let needs_down = block_in != width || stride != 1;
                blocks.push(ResBlock {
                    conv1: Conv::new(s, r, &format!("{name}.conv1"), block_in, width, 3, stride, 1, false),
                    bn1: Norm::new(s, &format!("{name}.bn1"), width),
                    conv2: Conv::new(s, r, &format!("{name}.conv2"), width, width, 3, 1, 1, false),
                    bn2: Norm::new(s, &format!("{name}.bn2"), width),
                    down: needs_down.then(|| {
                        (
                            Conv::new(s, r, &format!("{name}.down.conv"), block_in, width, 1, stride, 0, false),
                            Norm::new(s, &format!("{name}.down.bn"), width),
                        )
                    }),
                });
            }
            stages.push(blocks);
        }

        let laterals = (0..4)
            .map(|i| Conv::new(s, r, &format!("fpn.lateral{i}"), c[i], f, 1, 1, 0, true))
            .collect();
        let smooths = (0..4)
            .map(|i| Conv::new(s, r, &format!("fpn.smooth{i}"), f, f, 3, 1, 1, true))
            .collect();

        let dec_in = Conv::new(s, r, "depth.input.conv", f, d, 3, 1, 1, false);
        let dec_in_bn = Norm::new(s, "depth.input.bn", d);
        let dec_deconvs = (0..5)
            .map(|i| Deconv::new(s, r, &format!("depth.up{i}.deconv"), d, d, 3))
            .collect();
        let dec_bns = (0..5)
            .map(|i| Norm::new(s, &format!("depth.up{i}.bn"), d))
            .collect();
        let dec_skips = (0..3)
            .map(|i| Conv::new(s, r, &format!("depth.skip{i}"), f, d, 1, 1, 0, true))
            .collect();
        let dec_sides = (0..4)
            .map(|i| Conv::new_head(s, r, &format!("depth.side{i}"), d, 1, 1, 0.01))
            .collect();

        let rpn_conv = Conv::new(s, r, "rpn.conv", aug, f, 3, 1, 1, true);
        // prediction layers start near zero so early proposals and box
        // refinements stay sane
        let rpn_obj = Conv::new_head(s, r, "rpn.objectness", f, a_per_cell, 1, 0.01);
        let rpn_box = Conv::new_head(s, r, "rpn.box", f, 4 * a_per_cell, 1, 0.01);

        let reco_in = aug * (cfg.roi_feature_size / 2) * (cfg.roi_feature_size / 2);
        let reco_fc = Dense::new(s, r, "reco.fc", reco_in, 256);
        let reco_cls = Dense::new_head(s, r, "reco.cls", 256, cfg.num_classes, 0.01, 0.0);
        let reco_box = Dense::new_head(s, r, "reco.box", 256, 4 * cfg.num_classes, 0.001, 0.0);

        let mask_conv1 = Conv::new(s, r, "mask.conv1", aug, mask_w, 3, 1, 1, false);
        let mask_bn1 = Norm::new(s, "mask.bn1", mask_w);
        let mask_conv2 = Conv::new(s, r, "mask.conv2", mask_w, mask_w, 3, 1, 1, false);
        let mask_bn2 = Norm::new(s, "mask.bn2", mask_w);
        let mask_deconv = Deconv::new(s, r, "mask.deconv", mask_w, mask_w, 3);
        let mask_out = Conv::new_head(s, r, "mask.out", mask_w, cfg.num_classes, 1, 0.01);

        let w = cfg.volume_head_width;
        let vol_spatial = (cfg.roi_feature_size - 6) / 2; // k7 valid then pool 2
        let vol_conv1 = Conv::new(s, r, "volume.conv1", aug + 1, w, 7, 1, 0, false);
        let vol_bn1 = Norm::new(s, "volume.bn1", w);
        let vol_conv2 = Conv::new(s, r, "volume.conv2", w, w, 1, 1, 0, false);
        let vol_bn2 = Norm::new(s, "volume.bn2", w);
        // regression output primed at a plate-typical 0.08 L
        let vol_fc = Dense::new_head(s, r, "volume.fc", w * vol_spatial * vol_spatial, 1, 0.01, 0.08);

        let anchors = generate_anchors(&cfg);
        Ok(MealNet {
            cfg,
            store,
            stem_conv1,
            stem_bn1,
            stem_conv2,
            stem_bn2,
            stages,
            laterals,
            smooths,
            dec_in,
            dec_in_bn,
            dec_deconvs,
            dec_bns,
            dec_skips,
            dec_sides,
            rpn_conv,
            rpn_obj,
            rpn_box,
            reco_fc,
            reco_cls,
            reco_box,
            mask_conv1,
            mask_bn1,
            mask_conv2,
            mask_bn2,
            mask_deconv,
            mask_out,
            vol_conv1,
            vol_bn1,
            vol_conv2,
            vol_bn2,
            vol_fc,
            anchors,
        })
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    fn res_block(&self, ctx: &mut ForwardCtx<S>, x: NodeId, block: &ResBlock) -> NodeId {
        let mut out = ctx.conv(x, &block.conv1);
        out = ctx.bn_relu(out, &block.bn1);
        out = ctx.conv(out, &block.conv2);
        out = ctx.bn(out, &block.bn2);
        let shortcut = match &block.down {
            Some((conv, bn)) => {
                let s = ctx.conv(x, conv);
                ctx.bn(s, bn)
            }
            None => x,
        };
        let sum = ctx.tape.add(out, shortcut);
        ctx.tape.relu(sum)
    }

    /// Backbone + FPN: four levels of uniform width at strides 4..32.
    pub fn extract_features(&self, ctx: &mut ForwardCtx<S>, rgb: NodeId) -> [NodeId; 4] {
        let shape = ctx.tape.value(rgb).shape;
        assert_eq!(
            (shape.h, shape.w),
            (self.cfg.input_size, self.cfg.input_size),
            "input must be square at input_size"
        );
        let mut x = ctx.conv(rgb, &self.stem_conv1);
        x = ctx.bn_relu(x, &self.stem_bn1);
        x = ctx.conv(x, &self.stem_conv2);
        x = ctx.bn_relu(x, &self.stem_bn2);
        let mut level_feats = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = self.res_block(ctx, x, block);
            }
            level_feats.push(x);
        }
        // top-down fusion
        let mut pyramid = [NodeId(0); 4];
        let mut top = ctx.conv(level_feats[3], &self.laterals[3]);
        pyramid[3] = ctx.conv(top, &self.smooths[3]);
        for i in (0..3).rev() {
            let lateral = ctx.conv(level_feats[i], &self.laterals[i]);
            let up = ctx.tape.upsample_nearest2(top);
            top = ctx.tape.add(lateral, up);
            pyramid[i] = ctx.conv(top, &self.smooths[i]);
        }
        pyramid
    }

    /// Depth decoder: deconvolution ladder with skip connections and a
    /// sigmoid side prediction at each of the four scales.
    pub fn predict_depth(&self, ctx: &mut ForwardCtx<S>, pyramid: &[NodeId; 4]) -> [NodeId; 4] {
        let mut x = ctx.conv(pyramid[3], &self.dec_in);
        x = ctx.bn_relu(x, &self.dec_in_bn);
        let mut sides = Vec::with_capacity(4);
        for step in 0..5 {
            x = ctx.deconv(x, &self.dec_deconvs[step]);
            x = ctx.bn_relu(x, &self.dec_bns[step]);
            // skips from P4, P3, P2 while resolutions still match
            if step < 3 {
                let skip = ctx.conv(pyramid[2 - step], &self.dec_skips[step]);
                x = ctx.tape.add(x, skip);
            }
            // side predictions at input/8, /4, /2, /1
            if step >= 1 {
                let side = ctx.conv(x, &self.dec_sides[step - 1]);
                sides.push(ctx.tape.sigmoid(side));
            }
        }
        [sides[0], sides[1], sides[2], sides[3]]
    }

    /// Average-pools the point cloud to each level and appends its three
    /// channels.
    pub fn augment_with_cloud(
        &self,
        ctx: &mut ForwardCtx<S>,
        pyramid: &[NodeId; 4],
        cloud: NodeId,
    ) -> [NodeId; 4] {
        let mut out = [NodeId(0); 4];
        for (i, &level) in pyramid.iter().enumerate() {
            let factor = 4 << i;
            let pooled = ctx.tape.avg_pool(cloud, factor);
            out[i] = ctx.tape.concat_channels(&[level, pooled]);
        }
        out
    }

    /// Shared pipeline up to the RPN maps.
    pub fn forward_flow(
        &self,
        ctx: &mut ForwardCtx<S>,
        rgb: NodeId,
        cameras: &[CameraIntrinsics],
    ) -> FlowNodes {
        let pyramid = self.extract_features(ctx, rgb);
        let depth_sides = self.predict_depth(ctx, &pyramid);
        // only the largest scale feeds point-cloud conversion
        let cloud = ctx.tape.point_cloud(depth_sides[3], cameras);
        let pyramid_aug = self.augment_with_cloud(ctx, &pyramid, cloud);
        let mut rpn_obj = Vec::with_capacity(4);
        let mut rpn_box = Vec::with_capacity(4);
        for &level in &pyramid_aug {
            let mut h = ctx.conv(level, &self.rpn_conv);
            h = ctx.tape.relu(h);
            rpn_obj.push(ctx.conv(h, &self.rpn_obj));
            rpn_box.push(ctx.conv(h, &self.rpn_box));
        }
        FlowNodes {
            pyramid,
            depth_sides,
            cloud,
            pyramid_aug,
            rpn_obj,
            rpn_box,
        }
    }

    /// Reads the RPN maps for one batch item into flat per-anchor values in
    /// the anchor-generation order (level, row, column, anchor).
    pub fn read_rpn_outputs(
        &self,
        tape: &Tape<S>,
        flow: &FlowNodes,
        batch_item: usize,
    ) -> (Vec<f64>, Vec<[f64; 4]>) {
        let a_per_cell = self.cfg.anchors_per_cell();
        let mut objectness = Vec::with_capacity(self.anchors.len());
        let mut deltas = Vec::with_capacity(self.anchors.len());
        for level in 0..4 {
            let obj = tape.value(flow.rpn_obj[level]);
            let boxr = tape.value(flow.rpn_box[level]);
            let (h, w) = (obj.shape.h, obj.shape.w);
            for cy in 0..h {
                for cx in 0..w {
                    for a in 0..a_per_cell {
                        let logit = obj.at(batch_item, a, cy, cx).to_f64();
                        objectness.push(1.0 / (1.0 + (-logit).exp()));
                        deltas.push([
                            boxr.at(batch_item, 4 * a, cy, cx).to_f64(),
                            boxr.at(batch_item, 4 * a + 1, cy, cx).to_f64(),
                            boxr.at(batch_item, 4 * a + 2, cy, cx).to_f64(),
                            boxr.at(batch_item, 4 * a + 3, cy, cx).to_f64(),
                        ]);
                    }
                }
            }
        }
        (objectness, deltas)
    }

    /// FPN level for a box by the area rule: boxes around 16 px map to the
    /// finest level, doubling per level.
    pub fn level_for_box(&self, bbox: &BoxNorm) -> usize {
        let sqrt_area_px = (bbox.area().sqrt() * self.cfg.input_size as f64).max(1.0);
        let level = (sqrt_area_px / 16.0).log2().floor();
        (level.max(0.0) as usize).min(3)
    }

    /// Bilinear RoI pooling from the level each box maps to, batched per
    /// level and restored to input order. Returns a (P, C, out, out) node.
    pub fn roi_patches(
        &self,
        ctx: &mut ForwardCtx<S>,
        levels: &[NodeId; 4],
        rois: &[BoxNorm],
        batch_idx: &[usize],
        out_size: usize,
    ) -> NodeId {
        assert!(!rois.is_empty());
        assert_eq!(rois.len(), batch_idx.len());
        let mut per_level: [Vec<usize>; 4] = Default::default();
        for (i, roi) in rois.iter().enumerate() {
            per_level[self.level_for_box(roi)].push(i);
        }
        let mut parts = Vec::new();
        let mut order = Vec::new();
        for (level, members) in per_level.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut coords = Vec::with_capacity(members.len() * 4);
            let mut items = Vec::with_capacity(members.len());
            for &i in members {
                coords.extend_from_slice(&[
                    S::from_f64(rois[i].x0),
                    S::from_f64(rois[i].y0),
                    S::from_f64(rois[i].x1),
                    S::from_f64(rois[i].y1),
                ]);
                items.push(batch_idx[i]);
                order.push(i);
            }
            let coords_node = ctx
                .tape
                .leaf(Tensor::from_vec(Shape::new(members.len(), 4, 1, 1), coords));
            parts.push(ctx.tape.roi_align(levels[level], coords_node, &items, out_size));
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            ctx.tape.concat_rows(&parts)
        };
        // restore original order
        let mut inverse = vec![0usize; rois.len()];
        for (pos, &orig) in order.iter().enumerate() {
            inverse[orig] = pos;
        }
        ctx.tape.gather_rows(stacked, &inverse)
    }

    /// Two-layer dense head: class logits (P, C) and per-class box deltas
    /// (P, 4C).
    pub fn head_recognize(&self, ctx: &mut ForwardCtx<S>, patch7: NodeId) -> (NodeId, NodeId) {
        let hidden = ctx.dense(patch7, &self.reco_fc);
        let hidden = ctx.tape.relu(hidden);
        (
            ctx.dense(hidden, &self.reco_cls),
            ctx.dense(hidden, &self.reco_box),
        )
    }

    /// Mask head: per-class mask logits (P, C, mask_size, mask_size).
    pub fn head_mask(&self, ctx: &mut ForwardCtx<S>, patch: NodeId) -> NodeId {
        let mut x = ctx.conv(patch, &self.mask_conv1);
        x = ctx.bn_relu(x, &self.mask_bn1);
        x = ctx.conv(x, &self.mask_conv2);
        x = ctx.bn_relu(x, &self.mask_bn2);
        x = ctx.deconv(x, &self.mask_deconv);
        x = ctx.tape.relu(x);
        ctx.conv(x, &self.mask_out)
    }

    /// Volume head: convolution k7 → pool k2 → convolution k1 → dense, on
    /// the cloud-augmented patch with the soft mask appended. The scalar
    /// output is in liters.
    pub fn head_volume(&self, ctx: &mut ForwardCtx<S>, patch: NodeId, mask_prob: NodeId) -> NodeId {
        let x = ctx.tape.concat_channels(&[patch, mask_prob]);
        let mut x = ctx.conv(x, &self.vol_conv1);
        x = ctx.bn_relu(x, &self.vol_bn1);
        x = ctx.tape.avg_pool(x, 2);
        x = ctx.conv(x, &self.vol_conv2);
        x = ctx.bn_relu(x, &self.vol_bn2);
        ctx.dense(x, &self.vol_fc)
    }

    /// Applies pending BN running-stat updates gathered during a training
    /// forward pass.
    pub fn absorb_bn_updates(&mut self, updates: Vec<BnUpdate<S>>) {
        apply_bn_updates(&mut self.store, &updates);
    }
}

/// Converts an RGB image to the network input layout (1, 3, S, S), values
/// centered to [-0.5, 0.5].
pub fn image_to_tensor<S: Scalar>(rgb: &Rgb8Image) -> Tensor<S> {
    let (w, h) = (rgb.width, rgb.height);
    let mut data = vec![S::ZERO; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get(x, y);
            for c in 0..3 {
                data[(c * h + y) * w + x] = S::from_f64(f64::from(px[c]) / 255.0 - 0.5);
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

/// Stacks per-sample image tensors into one batch tensor.
pub fn stack_batch<S: Scalar>(items: &[Tensor<S>]) -> Tensor<S> {
    assert!(!items.is_empty());
    let s = items[0].shape;
    let mut data = Vec::with_capacity(items.len() * s.numel());
    for t in items {
        assert_eq!(t.shape, s);
        data.extend_from_slice(&t.data);
    }
    Tensor::from_vec(Shape::new(items.len(), s.c, s.h, s.w), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;

    fn run_flow(cfg: &ModelConfig, seed: u64) -> (MealNet<f32>, Tape<f32>, FlowNodes) {
        let net = MealNet::<f32>::new(cfg.clone(), seed).unwrap();
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from_u64(9);
        let rgb = Tensor::from_vec(
            Shape::new(1, 3, cfg.input_size, cfg.input_size),
            (0..3 * cfg.input_size * cfg.input_size)
                .map(|_| rng.range(-0.5, 0.5) as f32)
                .collect(),
        );
        let input = tape.leaf(rgb);
        let mut ctx = ForwardCtx::new(&mut tape, &net.store, false);
        let flow = net.forward_flow(&mut ctx, input, &[CameraIntrinsics::default()]);
        (net, tape, flow)
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let cfg = ModelConfig::tiny(64);
        let (_, tape, flow) = run_flow(&cfg, 0);
        for (i, &level) in flow.pyramid.iter().enumerate() {
            let s = tape.value(level).shape;
            assert_eq!(s.h, 64 >> (i + 2), "level {i}");
            assert_eq!(s.c, cfg.backbone_channels);
        }
    }

    #[test]
    fn depth_sides_double_and_stay_in_unit_range() {
        let cfg = ModelConfig::tiny(64);
        let (_, tape, flow) = run_flow(&cfg, 1);
        let scales = cfg.depth_scales();
        for (i, &side) in flow.depth_sides.iter().enumerate() {
            let v = tape.value(side);
            assert_eq!((v.shape.h, v.shape.w), (scales[i], scales[i]));
            assert!(v.data.iter().all(|&d| (0.0..=1.0).contains(&d)));
        }
    }

    #[test]
    fn cloud_augment_appends_three_channels() {
        let cfg = ModelConfig::tiny(64);
        let (_, tape, flow) = run_flow(&cfg, 2);
        for (p, a) in flow.pyramid.iter().zip(&flow.pyramid_aug) {
            assert_eq!(
                tape.value(*a).shape.c,
                tape.value(*p).shape.c + 3
            );
        }
    }

    #[test]
    fn constant_depth_gives_constant_z_channel_at_every_level() {
        // run augment on a constant synthetic cloud to isolate the pooling
        let cfg = ModelConfig::tiny(64);
        let net = MealNet::<f32>::new(cfg.clone(), 3).unwrap();
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from_u64(4);
        let rgb = Tensor::from_vec(
            Shape::new(1, 3, 64, 64),
            (0..3 * 64 * 64).map(|_| rng.range(-0.5, 0.5) as f32).collect(),
        );
        let input = tape.leaf(rgb);
        let mut ctx = ForwardCtx::new(&mut tape, &net.store, false);
        let pyramid = net.extract_features(&mut ctx, input);
        let depth = ctx.tape.leaf(Tensor::filled(Shape::new(1, 1, 64, 64), 0.3f32));
        let cloud = ctx.tape.point_cloud(depth, &[CameraIntrinsics::default()]);
        let aug = net.augment_with_cloud(&mut ctx, &pyramid, cloud);
        for &level in &aug {
            let v = tape.value(level);
            let c = v.shape.c;
            for y in 0..v.shape.h {
                for x in 0..v.shape.w {
                    assert!((v.at(0, c - 1, y, x) - 0.3).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::tiny(64);
        let (_, tape_a, flow_a) = run_flow(&cfg, 7);
        let (_, tape_b, flow_b) = run_flow(&cfg, 7);
        for (a, b) in flow_a.depth_sides.iter().zip(&flow_b.depth_sides) {
            assert_eq!(tape_a.value(*a).data, tape_b.value(*b).data);
        }
    }

    #[test]
    fn recognition_head_shapes() {
        let cfg = ModelConfig::tiny(64);
        let (net, mut tape, flow) = {
            let (n, t, f) = run_flow(&cfg, 5);
            (n, t, f)
        };
        let mut ctx = ForwardCtx::new(&mut tape, &net.store, false);
        let rois = [
            BoxNorm {
                x0: 0.1,
                y0: 0.2,
                x1: 0.5,
                y1: 0.6,
            },
            BoxNorm {
                x0: 0.0,
                y0: 0.0,
                x1: 1.0,
                y1: 1.0,
            },
        ];
        let patch7 = net.roi_patches(
            &mut ctx,
            &flow.pyramid_aug,
            &rois,
            &[0, 0],
            cfg.roi_feature_size / 2,
        );
        let (cls, boxes) = net.head_recognize(&mut ctx, patch7);
        assert_eq!(tape.value(cls).shape, Shape::new(2, cfg.num_classes, 1, 1));
        assert_eq!(
            tape.value(boxes).shape,
            Shape::new(2, 4 * cfg.num_classes, 1, 1)
        );
        // softmax over logits sums to one
        let logits = tape.value(cls);
        for p in 0..2 {
            let row: Vec<f64> = (0..cfg.num_classes)
                .map(|c| logits.at(p, c, 0, 0) as f64)
                .collect();
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let sum: f64 = row.iter().map(|z| (z - m).exp()).sum();
            let total: f64 = row.iter().map(|z| (z - m).exp() / sum).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_and_volume_head_shapes() {
        let cfg = ModelConfig::tiny(64);
        let (net, mut tape, flow) = run_flow(&cfg, 6);
        let mut ctx = ForwardCtx::new(&mut tape, &net.store, false);
        let roi = BoxNorm {
            x0: 0.2,
            y0: 0.2,
            x1: 0.7,
            y1: 0.7,
        };
        let patch = net.roi_patches(&mut ctx, &flow.pyramid_aug, &[roi], &[0], cfg.roi_feature_size);
        let mask_logits = net.head_mask(&mut ctx, patch);
        assert_eq!(
            ctx.tape.value(mask_logits).shape,
            Shape::new(1, cfg.num_classes, cfg.mask_size, cfg.mask_size)
        );
        let mask_prob = {
            let ch = ctx.tape.gather_channel(mask_logits, &[1]);
            let sig = ctx.tape.sigmoid(ch);
            ctx.tape.avg_pool(sig, 2)
        };
        let volume = net.head_volume(&mut ctx, patch, mask_prob);
        assert_eq!(ctx.tape.value(volume).shape, Shape::new(1, 1, 1, 1));
    }

    #[test]
    fn whole_image_roi_on_constant_features_is_constant() {
        let cfg = ModelConfig::tiny(64);
        let net = MealNet::<f32>::new(cfg.clone(), 8).unwrap();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &net.store, false);
        let feat = ctx.tape.leaf(Tensor::filled(Shape::new(1, 4, 8, 8), 0.37f32));
        let levels = [feat, feat, feat, feat];
        let roi = BoxNorm {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        };
        let patch = net.roi_patches(&mut ctx, &levels, &[roi], &[0], 6);
        for &v in &tape.value(patch).data {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }
}
