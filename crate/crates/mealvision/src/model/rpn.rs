//! Anchor generation, proposal decoding and non-maximum suppression.

use super::targets::{box_iou, decode_box, BoxNorm};
use super::ModelConfig;

/// One anchor box plus the pyramid level and flat cell index it came from.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    pub bbox: BoxNorm,
    pub level: usize,
}

/// Dense anchor grid over all pyramid levels, in a fixed deterministic
/// order (level-major, then row-major cells, then scale×ratio). The base
/// anchor edge at each level is 4 strides.
pub fn generate_anchors(config: &ModelConfig) -> Vec<Anchor> {
    let mut anchors = Vec::new();
    for (level, stride) in [4usize, 8, 16, 32].iter().enumerate() {
        let cells = config.input_size / stride;
        let base = 4.0 * *stride as f64 / config.input_size as f64;
        for cy in 0..cells {
            for cx in 0..cells {
                let ccx = (cx as f64 + 0.5) / cells as f64;
                let ccy = (cy as f64 + 0.5) / cells as f64;
                for &scale in &config.anchor_scales {
                    for &ratio in &config.anchor_aspect_ratios {
                        // ratio = h/w at constant area
                        let w = base * scale / ratio.sqrt();
                        let h = base * scale * ratio.sqrt();
                        anchors.push(Anchor {
                            bbox: BoxNorm {
                                x0: ccx - w / 2.0,
                                y0: ccy - h / 2.0,
                                x1: ccx + w / 2.0,
                                y1: ccy + h / 2.0,
                            },
                            level,
                        });
                    }
                }
            }
        }
    }
    anchors
}

/// Greedy non-maximum suppression over (box, score) pairs already sorted by
/// descending score. Returns indices of the kept entries.
pub fn nms(boxes: &[BoxNorm], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    'outer: for i in 0..boxes.len() {
        for &j in &kept {
            if box_iou(&boxes[i], &boxes[j]) > threshold {
                continue 'outer;
            }
        }
        kept.push(i);
    }
    kept
}

/// Sorts indices by score descending with ties broken by the lower index.
pub fn sort_by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    order
}

/// Decodes raw RPN outputs into scored proposals: top `pre_nms` anchors by
/// objectness, box decoding with clamping, NMS, then the top `keep`.
pub fn decode_proposals(
    anchors: &[Anchor],
    objectness: &[f64],
    deltas: &[[f64; 4]],
    pre_nms: usize,
    nms_threshold: f64,
    keep: usize,
) -> Vec<super::RoI> {
    assert_eq!(anchors.len(), objectness.len());
    assert_eq!(anchors.len(), deltas.len());
    let order = sort_by_score_desc(objectness);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for &idx in order.iter().take(pre_nms) {
        let decoded = decode_box(&anchors[idx].bbox, &deltas[idx]).clamp_unit();
        if decoded.is_valid() && decoded.area() > 1e-6 {
            boxes.push(decoded);
            scores.push(objectness[idx]);
        }
    }
    let kept = nms(&boxes, nms_threshold);
    kept.into_iter()
        .take(keep)
        .map(|i| super::RoI {
            bbox: boxes[i],
            score: scores[i],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_count_matches_grid() {
        let cfg = ModelConfig::default();
        let anchors = generate_anchors(&cfg);
        let expected: usize = [4usize, 8, 16, 32]
            .iter()
            .map(|s| (256 / s) * (256 / s) * 9)
            .sum();
        assert_eq!(anchors.len(), expected);
    }

    #[test]
    fn nms_threshold_one_keeps_everything() {
        let boxes: Vec<BoxNorm> = (0..5)
            .map(|i| BoxNorm {
                x0: 0.1 + i as f64 * 0.01,
                y0: 0.1,
                x1: 0.4 + i as f64 * 0.01,
                y1: 0.4,
            })
            .collect();
        // IoU of near-identical boxes is < 1.0, so nothing exceeds 1.0
        assert_eq!(nms(&boxes, 1.0).len(), 5);
        // harsh threshold collapses them to the first
        assert_eq!(nms(&boxes, 0.2).len(), 1);
    }

    #[test]
    fn score_ties_break_by_lowest_index() {
        let scores = vec![0.5, 0.9, 0.9, 0.1];
        assert_eq!(sort_by_score_desc(&scores), vec![1, 2, 0, 3]);
    }

    #[test]
    fn decode_keeps_top_candidates() {
        let cfg = ModelConfig::default();
        let anchors = generate_anchors(&cfg);
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        let objectness: Vec<f64> = (0..anchors.len()).map(|_| rng.uniform()).collect();
        let deltas = vec![[0.0; 4]; anchors.len()];
        let proposals = decode_proposals(
            &anchors,
            &objectness,
            &deltas,
            cfg.rpn_proposals,
            cfg.rpn_nms_threshold,
            cfg.kept_candidates,
        );
        assert_eq!(proposals.len(), cfg.kept_candidates);
        for p in &proposals {
            assert!(p.bbox.is_valid());
            assert!(p.bbox.x0 >= 0.0 && p.bbox.x1 <= 1.0);
        }
        // scores are sorted descending after NMS
        for pair in proposals.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }
}
