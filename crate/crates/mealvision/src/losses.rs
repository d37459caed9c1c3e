//! Training objectives: the joint multi-task loss and its constituents.
//!
//! The total is the plain (unweighted) sum of the four depth-scale terms
//! and the per-RoI recognition, box, mask and volume terms; mask and volume
//! terms count positive RoIs only. Scalar entry points mirror the tape ops
//! so tests and external callers can evaluate single values directly.

use serde::{Deserialize, Serialize};

use crate::geometry::DepthMap;
use crate::nn::{NodeId, Scalar, Shape, Tape, Tensor};

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the absolute term in the volume loss.
    pub alpha: f64,
    /// Floor for the percentage denominator, in liters.
    pub epsilon_vol: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.01,
            epsilon_vol: 1e-6,
        }
    }
}

/// Per-iteration loss record. `total` is the exact sum of the parts:
/// the four depth scales plus the RoI-summed classification, box, mask and
/// volume terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub depth: [f64; 4],
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub vol: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.depth.iter().all(|d| d.is_finite())
            && self.cls.is_finite()
            && self.bbox.is_finite()
            && self.mask.is_finite()
            && self.vol.is_finite()
            && self.total.is_finite()
    }
}

/// Mean absolute depth error at one scale, in meters. The ground truth is
/// area-downsampled to the prediction's resolution.
pub fn loss_depth_scalar(pred: &DepthMap, gt: &DepthMap) -> f64 {
    let factor = gt.width() / pred.width();
    assert_eq!(pred.width() * factor, gt.width(), "scale mismatch");
    assert_eq!(pred.height() * factor, gt.height(), "scale mismatch");
    let down = downsample_depth(gt, factor);
    let mut sum = 0.0;
    for (p, g) in pred.values().iter().zip(down.values()) {
        sum += (p - g).abs();
    }
    sum / pred.values().len() as f64
}

/// Area-downsamples a depth map by an integer factor.
pub fn downsample_depth(gt: &DepthMap, factor: usize) -> DepthMap {
    if factor == 1 {
        return gt.clone();
    }
    let (w, h) = (gt.width() / factor, gt.height() / factor);
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += gt.get(x * factor + dx, y * factor + dy);
                }
            }
            values.push(s / (factor * factor) as f64);
        }
    }
    DepthMap::new(w, h, values).expect("downsample shape")
}

/// Ground-truth depth as a constant tensor at one prediction scale.
pub fn depth_target_tensor<S: Scalar>(gts: &[&DepthMap], scale: usize) -> Tensor<S> {
    let factor = gts[0].width() / scale;
    let mut data = Vec::with_capacity(gts.len() * scale * scale);
    for gt in gts {
        let down = downsample_depth(gt, factor);
        data.extend(down.values().iter().map(|&v| S::from_f64(v)));
    }
    Tensor::from_vec(Shape::new(gts.len(), 1, scale, scale), data)
}

/// Multi-scale depth loss: one mean-absolute-error node per scale.
pub fn loss_depth_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    predictions: &[NodeId; 4],
    gts: &[&DepthMap],
) -> [NodeId; 4] {
    let mut out = [NodeId(0); 4];
    for (i, &pred) in predictions.iter().enumerate() {
        let scale = tape.value(pred).shape.h;
        let target = depth_target_tensor::<S>(gts, scale);
        out[i] = tape.l1_mean(pred, target);
    }
    out
}

/// Volume loss for one item: |v̂ − v*| / max(v*, ε) + α·|v̂ − v*|, with both
/// volumes in milliliters at the interface and the absolute term computed
/// in liters.
pub fn loss_volume_scalar(v_hat_ml: f64, v_star_ml: f64, config: &LossConfig) -> f64 {
    let v_hat = v_hat_ml / 1000.0;
    let v_star = v_star_ml / 1000.0;
    let diff = (v_hat - v_star).abs();
    diff / v_star.max(config.epsilon_vol) + config.alpha * diff
}

/// Softmax cross-entropy for one RoI.
pub fn loss_cls_scalar(logits: &[f64], target_class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let lse: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    lse.ln() + max - logits[target_class]
}

/// Smooth-L1 box loss for one RoI (sum over the four coordinates).
pub fn loss_bbox_scalar(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum()
}

/// Per-pixel binary cross-entropy (mean over the grid) on the target-class
/// mask channel of one RoI.
pub fn loss_mask_scalar(mask_logits: &[f64], target: &[f64]) -> f64 {
    assert_eq!(mask_logits.len(), target.len());
    let n = mask_logits.len() as f64;
    mask_logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln())
        .sum::<f64>()
        / n
}

/// Scalar constituents of one image's loss, for assembling the total.
pub struct LossTerms {
    pub depth: [f64; 4],
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub vol: f64,
}

/// The joint loss: total = Σ_scales depth + Σ_RoI (cls + bbox + mask + vol).
pub fn loss_total(terms: &LossTerms) -> LossBreakdown {
    let total =
        terms.depth.iter().sum::<f64>() + terms.cls + terms.bbox + terms.mask + terms.vol;
    LossBreakdown {
        depth: terms.depth,
        cls: terms.cls,
        bbox: terms.bbox,
        mask: terms.mask,
        vol: terms.vol,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff_gradient, max_rel_error};
    use crate::rng::Rng;

    #[test]
    fn depth_loss_zero_at_identity_and_constant_offset() {
        let mut rng = Rng::seed_from_u64(1);
        let gt = DepthMap::new(32, 32, (0..1024).map(|_| rng.range(0.2, 0.8)).collect()).unwrap();
        assert_eq!(loss_depth_scalar(&gt, &gt), 0.0);
        let mut shifted = gt.clone();
        for y in 0..32 {
            for x in 0..32 {
                shifted.set(x, y, gt.get(x, y) + 0.005);
            }
        }
        let l = loss_depth_scalar(&shifted, &gt);
        assert!((l - 0.005).abs() < 1e-12, "l={l}");
    }

    #[test]
    fn depth_loss_matches_scalar_loop_at_lower_scale() {
        let mut rng = Rng::seed_from_u64(2);
        let gt = DepthMap::new(16, 16, (0..256).map(|_| rng.range(0.0, 1.0)).collect()).unwrap();
        let pred = DepthMap::new(8, 8, (0..64).map(|_| rng.range(0.0, 1.0)).collect()).unwrap();
        let fast = loss_depth_scalar(&pred, &gt);
        // independent scalar-by-scalar recomputation
        let mut expected = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let mut g = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        g += gt.get(x * 2 + dx, y * 2 + dy);
                    }
                }
                expected += (pred.get(x, y) - g / 4.0).abs();
            }
        }
        expected /= 64.0;
        assert!((fast - expected).abs() < 1e-9);
    }

    #[test]
    fn volume_loss_unit_values() {
        let cfg = LossConfig::default();
        assert_eq!(loss_volume_scalar(70.0, 70.0, &cfg), 0.0);
        // v* = 0.100 L, v̂ = 0.110 L → 0.1 + 0.01·0.01 = 0.1001
        let l = loss_volume_scalar(110.0, 100.0, &cfg);
        assert!((l - 0.1001).abs() < 1e-12, "l={l}");
    }

    #[test]
    fn volume_loss_subgradient_bound_near_target() {
        let cfg = LossConfig::default();
        let v_star = 80.0; // mL = 0.08 L
        let bound = 1.0 / 0.08 + cfg.alpha;
        for dv in [-1e-6, 1e-6] {
            let slope = (loss_volume_scalar(v_star + dv, v_star, &cfg)
                - loss_volume_scalar(v_star, v_star, &cfg))
                / (dv / 1000.0);
            assert!(slope.abs() <= bound + 1e-6, "slope={slope}, bound={bound}");
        }
    }

    #[test]
    fn cls_loss_uniform_logits_is_ln_c() {
        let logits = vec![0.7; 9];
        let l = loss_cls_scalar(&logits, 3);
        assert!((l - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bbox_loss_zero_at_perfect_deltas() {
        assert_eq!(
            loss_bbox_scalar(&[0.1, -0.2, 0.3, 0.0], &[0.1, -0.2, 0.3, 0.0]),
            0.0
        );
    }

    #[test]
    fn mask_loss_saturates_to_zero() {
        let target = vec![1.0, 0.0, 1.0, 0.0];
        let logits = vec![40.0, -40.0, 40.0, -40.0];
        assert!(loss_mask_scalar(&logits, &target) < 1e-12);
    }

    #[test]
    fn total_is_exact_sum_and_gates_on_positives() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..50 {
            let terms = LossTerms {
                depth: [rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()],
                cls: rng.uniform() * 3.0,
                bbox: rng.uniform(),
                mask: rng.uniform(),
                vol: rng.uniform(),
            };
            let b = loss_total(&terms);
            let hand = terms.depth[0]
                + terms.depth[1]
                + terms.depth[2]
                + terms.depth[3]
                + terms.cls
                + terms.bbox
                + terms.mask
                + terms.vol;
            assert!((b.total - hand).abs() < 1e-12);
        }
        // no positive RoIs: only depth and classification terms remain
        let no_pos = loss_total(&LossTerms {
            depth: [0.1, 0.2, 0.3, 0.4],
            cls: 2.0,
            bbox: 0.0,
            mask: 0.0,
            vol: 0.0,
        });
        assert!((no_pos.total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn volume_and_depth_loss_gradients_match_finite_differences() {
        // volume loss via the tape op, away from the non-smooth point
        let v = [0.05f64, 0.11, 0.18];
        let targets = [0.04, 0.12, 0.03];
        let build = |tape: &mut Tape<f64>, values: &[f64]| {
            let node = tape.leaf(Tensor::from_vec(Shape::new(3, 1, 1, 1), values.to_vec()));
            let loss = tape.volume_loss_sum(node, &targets, 0.01, 1e-6);
            (node, loss)
        };
        let mut tape = Tape::new();
        let (node, loss) = build(&mut tape, &v);
        let grads = tape.backward(loss);
        let analytic = grads.get(node).unwrap().data.clone();
        let mut f = |probe: &[f64]| {
            let mut t = Tape::new();
            let (_, l) = build(&mut t, probe);
            t.value(l).item()
        };
        let numeric = central_diff_gradient(&mut f, &v, 1e-6);
        assert!(max_rel_error(&analytic, &numeric, 1e-9) < 1e-4);

        // depth loss via the tape op
        let mut rng = Rng::seed_from_u64(9);
        let pred: Vec<f64> = (0..16).map(|_| rng.range(0.2, 0.8)).collect();
        let gt = DepthMap::new(4, 4, (0..16).map(|_| rng.range(0.2, 0.8)).collect()).unwrap();
        let target = depth_target_tensor::<f64>(&[&gt], 4);
        let build2 = |tape: &mut Tape<f64>, values: &[f64]| {
            let node = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 4, 4), values.to_vec()));
            let loss = tape.l1_mean(node, target.clone());
            (node, loss)
        };
        let mut tape2 = Tape::new();
        let (node2, loss2) = build2(&mut tape2, &pred);
        let grads2 = tape2.backward(loss2);
        let analytic2 = grads2.get(node2).unwrap().data.clone();
        let mut f2 = |probe: &[f64]| {
            let mut t = Tape::new();
            let (_, l) = build2(&mut t, probe);
            t.value(l).item()
        };
        let numeric2 = central_diff_gradient(&mut f2, &pred, 1e-6);
        assert!(max_rel_error(&analytic2, &numeric2, 1e-9) < 1e-4);
    }

    #[test]
    fn tape_losses_agree_with_scalar_entry_points() {
        // the tape op and the scalar function implement the same formula
        let cfg = LossConfig::default();
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.11, 0.07]));
        let loss = tape.volume_loss_sum(v, &[0.10, 0.08], cfg.alpha, cfg.epsilon_vol);
        let expect =
            loss_volume_scalar(110.0, 100.0, &cfg) + loss_volume_scalar(70.0, 80.0, &cfg);
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }
}
