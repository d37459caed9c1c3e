//! Box arithmetic, RoI-to-ground-truth assignment, and mask target
//! rasterization.

use crate::mask::Mask;

/// Axis-aligned box in normalized [0, 1] coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxNorm {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxNorm {
    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn clamp_unit(&self) -> BoxNorm {
        BoxNorm {
            x0: self.x0.clamp(0.0, 1.0),
            y0: self.y0.clamp(0.0, 1.0),
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0
    }

    pub fn from_pixel(bbox: &crate::dataset::BBox, image_size: usize) -> BoxNorm {
        let s = image_size as f64;
        BoxNorm {
            x0: bbox.x_min as f64 / s,
            y0: bbox.y_min as f64 / s,
            x1: bbox.x_max as f64 / s,
            y1: bbox.y_max as f64 / s,
        }
    }
}

pub fn box_iou(a: &BoxNorm, b: &BoxNorm) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box regression targets relative to an anchor/proposal, scaled by the
/// conventional (10, 10, 5, 5) weights.
pub const BOX_DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

pub fn encode_box(anchor: &BoxNorm, target: &BoxNorm) -> [f64; 4] {
    let (aw, ah) = (anchor.width().max(1e-6), anchor.height().max(1e-6));
    let (acx, acy) = (anchor.x0 + aw / 2.0, anchor.y0 + ah / 2.0);
    let (tw, th) = (target.width().max(1e-6), target.height().max(1e-6));
    let (tcx, tcy) = (target.x0 + tw / 2.0, target.y0 + th / 2.0);
    [
        (tcx - acx) / aw * BOX_DELTA_WEIGHTS[0],
        (tcy - acy) / ah * BOX_DELTA_WEIGHTS[1],
        (tw / aw).ln() * BOX_DELTA_WEIGHTS[2],
        (th / ah).ln() * BOX_DELTA_WEIGHTS[3],
    ]
}

pub fn decode_box(anchor: &BoxNorm, deltas: &[f64; 4]) -> BoxNorm {
    let (aw, ah) = (anchor.width().max(1e-6), anchor.height().max(1e-6));
    let (acx, acy) = (anchor.x0 + aw / 2.0, anchor.y0 + ah / 2.0);
    let dx = deltas[0] / BOX_DELTA_WEIGHTS[0];
    let dy = deltas[1] / BOX_DELTA_WEIGHTS[1];
    // clamped so a wild regression output cannot overflow exp()
    let dw = (deltas[2] / BOX_DELTA_WEIGHTS[2]).clamp(-4.0, 4.0);
    let dh = (deltas[3] / BOX_DELTA_WEIGHTS[3]).clamp(-4.0, 4.0);
    let cx = acx + dx * aw;
    let cy = acy + dy * ah;
    let w = aw * dw.exp();
    let h = ah * dh.exp();
    BoxNorm {
        x0: cx - w / 2.0,
        y0: cy - h / 2.0,
        x1: cx + w / 2.0,
        y1: cy + h / 2.0,
    }
}

/// Ground-truth match of one RoI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    /// Index of the ground-truth box with maximal IoU (None when there is
    /// no ground truth at all).
    pub gt_index: Option<usize>,
    pub iou: f64,
    /// IoU strictly above the positivity threshold.
    pub positive: bool,
}

/// Matches each RoI to the ground-truth box of maximal IoU; a RoI is
/// positive iff that IoU exceeds `threshold` strictly. Ties between ground
/// truths resolve to the lowest index.
pub fn assign_targets(rois: &[BoxNorm], gt: &[BoxNorm], threshold: f64) -> Vec<RoiTarget> {
    rois.iter()
        .map(|roi| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                let iou = box_iou(roi, g);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) => RoiTarget {
                    gt_index: Some(j),
                    iou,
                    positive: iou > threshold,
                },
                None => RoiTarget {
                    gt_index: None,
                    iou: 0.0,
                    positive: false,
                },
            }
        })
        .collect()
}

/// Samples a ground-truth instance mask into the RoI-aligned `grid_size`
/// square used as the mask-head target (bilinear, thresholded at 0.5).
pub fn rasterize_mask_target(mask: &Mask, roi: &BoxNorm, grid_size: usize) -> Vec<f64> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::with_capacity(grid_size * grid_size);
    for gy in 0..grid_size {
        for gx in 0..grid_size {
            let u = roi.x0 + (gx as f64 + 0.5) / grid_size as f64 * (roi.x1 - roi.x0);
            let v = roi.y0 + (gy as f64 + 0.5) / grid_size as f64 * (roi.y1 - roi.y0);
            let fx = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let x0 = (fx.floor() as usize).min(w.saturating_sub(2));
            let y0 = (fy.floor() as usize).min(h.saturating_sub(2));
            let (lx, ly) = (fx - x0 as f64, fy - y0 as f64);
            let at = |x: usize, y: usize| -> f64 {
                if mask.get(x.min(w - 1), y.min(h - 1)) {
                    1.0
                } else {
                    0.0
                }
            };
            let value = at(x0, y0) * (1.0 - lx) * (1.0 - ly)
                + at(x0 + 1, y0) * lx * (1.0 - ly)
                + at(x0, y0 + 1) * (1.0 - lx) * ly
                + at(x0 + 1, y0 + 1) * lx * ly;
            out.push(if value >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}
