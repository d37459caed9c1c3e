//! Evaluation suite: region-based segmentation indices, confusion matrix,
//! the AP family on mask IoU, in-plate depth errors, and per-item volume
//! percentage error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::DepthMap;
use crate::mask::Mask;
use crate::model::sort_by_score_desc;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("plate mask is empty")]
    EmptyPlate,
    #[error("depth sizes differ: pred {pred_w}x{pred_h}, gt {gt_w}x{gt_h}")]
    SizeMismatch {
        pred_w: usize,
        pred_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
}

/// A set of binary masks over one image grid.
pub type SegmentSet = Vec<Mask>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NiMode {
    /// Worst-case directional index.
    Min,
    /// Area-weighted directional index.
    Sum,
}

/// Normalized directional overlap index between segment sets: for each
/// segment of `a`, the best overlap with any segment of `b`, normalized by
/// the `a` segment's area, combined per `mode`. An empty `a` scores 0.
pub fn ni_directional(a: &SegmentSet, b: &SegmentSet, mode: NiMode) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let best: Vec<(f64, f64)> = a
        .iter()
        .map(|ai| {
            let area = ai.area() as f64;
            let best = b
                .iter()
                .map(|bj| ai.intersection_area(bj) as f64)
                .fold(0.0, f64::max);
            (best, area)
        })
        .collect();
    match mode {
        NiMode::Min => best
            .iter()
            .map(|(overlap, area)| if *area > 0.0 { overlap / area } else { 0.0 })
            .fold(f64::INFINITY, f64::min),
        NiMode::Sum => {
            let total: f64 = best.iter().map(|(_, area)| area).sum();
            if total == 0.0 {
                0.0
            } else {
                best.iter().map(|(overlap, _)| overlap).sum::<f64>() / total
            }
        }
    }
}

/// Harmonic combination of the two directional indices; 0 when both vanish.
pub fn f_combine(fwd: f64, rev: f64) -> f64 {
    if fwd + rev == 0.0 {
        0.0
    } else {
        2.0 * fwd * rev / (fwd + rev)
    }
}

/// Both F indices for one image: (F_sum, F_min), as fractions.
pub fn f_metrics(predicted: &SegmentSet, truth: &SegmentSet) -> (f64, f64) {
    let f_sum = f_combine(
        ni_directional(predicted, truth, NiMode::Sum),
        ni_directional(truth, predicted, NiMode::Sum),
    );
    let f_min = f_combine(
        ni_directional(predicted, truth, NiMode::Min),
        ni_directional(truth, predicted, NiMode::Min),
    );
    (f_sum, f_min)
}

/// One scored detection as the metrics see it.
#[derive(Debug, Clone)]
pub struct ScoredSegment {
    pub class_id: usize,
    pub score: f64,
    pub mask: Mask,
    pub volume_ml: f64,
}

/// One ground-truth instance as the metrics see it.
#[derive(Debug, Clone)]
pub struct TruthSegment {
    pub class_id: usize,
    pub mask: Mask,
    pub volume_ml: f64,
}

/// Detections and ground truth of one evaluated image.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub detections: Vec<ScoredSegment>,
    pub truths: Vec<TruthSegment>,
}

/// Confusion counts over matched instances; row = true class, column =
/// predicted class, plus a trailing `missed` column for unmatched ground
/// truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// classes × (classes + 1) counts, row major.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * (classes + 1)],
        }
    }

    pub fn at(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * (self.classes + 1) + pred_class]
    }

    pub fn missed(&self, true_class: usize) -> u64 {
        self.at(true_class, self.classes)
    }

    fn add(&mut self, true_class: usize, column: usize) {
        self.counts[true_class * (self.classes + 1) + column] += 1;
    }

    /// Row-normalized percentages; rows of a non-empty class sum to 100.
    pub fn percentages(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|row| {
                let total: u64 = (0..=self.classes).map(|c| self.at(row, c)).sum();
                (0..=self.classes)
                    .map(|c| {
                        if total == 0 {
                            0.0
                        } else {
                            self.at(row, c) as f64 / total as f64 * 100.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Mean of the diagonal of the percentage form over non-empty rows.
    pub fn mean_diagonal_percent(&self) -> f64 {
        let pct = self.percentages();
        let mut sum = 0.0;
        let mut rows = 0;
        for row in 0..self.classes {
            let total: u64 = (0..=self.classes).map(|c| self.at(row, c)).sum();
            if total > 0 {
                sum += pct[row][row];
                rows += 1;
            }
        }
        if rows == 0 {
            0.0
        } else {
            sum / rows as f64
        }
    }
}

/// Greedy score-ordered matching of detections to ground truth by maximal
/// mask IoU at `iou_threshold`. Returns, per detection index, the matched
/// truth index.
fn match_greedy(eval: &ImageEval, iou_threshold: f64) -> Vec<Option<usize>> {
    let scores: Vec<f64> = eval.detections.iter().map(|d| d.score).collect();
    let order = sort_by_score_desc(&scores);
    let mut taken = vec![false; eval.truths.len()];
    let mut matched = vec![None; eval.detections.len()];
    for &d_idx in &order {
        let det = &eval.detections[d_idx];
        let mut best: Option<(usize, f64)> = None;
        for (t_idx, truth) in eval.truths.iter().enumerate() {
            if taken[t_idx] {
                continue;
            }
            let iou = det.mask.iou(&truth.mask);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((t_idx, iou));
            }
        }
        if let Some((t_idx, _)) = best {
            taken[t_idx] = true;
            matched[d_idx] = Some(t_idx);
        }
    }
    matched
}

/// Confusion matrix over a set of images: each ground-truth instance
/// contributes to the row of its class, in the column of the matched
/// prediction's class (class-agnostic matching by maximal mask IoU ≥ 0.5),
/// or to the trailing `missed` column when nothing matched it.
pub fn confusion(images: &[ImageEval], classes: usize) -> ConfusionMatrix {
    let mut matrix = ConfusionMatrix::new(classes);
    for eval in images {
        let matched = match_greedy(eval, 0.5);
        let mut matched_class: Vec<Option<usize>> = vec![None; eval.truths.len()];
        for (d_idx, m) in matched.iter().enumerate() {
            if let Some(t_idx) = m {
                matched_class[*t_idx] = Some(eval.detections[d_idx].class_id);
            }
        }
        for (t_idx, truth) in eval.truths.iter().enumerate() {
            match matched_class[t_idx] {
                Some(pred_class) => matrix.add(truth.class_id, pred_class),
                None => matrix.add(truth.class_id, classes),
            }
        }
    }
    matrix
}

/// Average precision at one mask-IoU threshold, averaged over classes that
/// have ground truth. AP per class is the area under the interpolated
/// precision-recall curve of score-sorted detections pooled across images.
pub fn average_precision(images: &[ImageEval], classes: usize, iou_threshold: f64) -> f64 {
    let per_class = per_class_ap(images, classes, iou_threshold);
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// AP per class; None where the class has no ground truth.
pub fn per_class_ap(
    images: &[ImageEval],
    classes: usize,
    iou_threshold: f64,
) -> Vec<Option<f64>> {
    (0..classes)
        .map(|class| {
            let n_gt: usize = images
                .iter()
                .map(|e| e.truths.iter().filter(|t| t.class_id == class).count())
                .sum();
            if n_gt == 0 {
                return None;
            }
            let mut records: Vec<(f64, bool)> = Vec::new();
            for eval in images {
                let class_eval = ImageEval {
                    detections: eval
                        .detections
                        .iter()
                        .filter(|d| d.class_id == class)
                        .cloned()
                        .collect(),
                    truths: eval
                        .truths
                        .iter()
                        .filter(|t| t.class_id == class)
                        .cloned()
                        .collect(),
                };
                let matched = match_greedy(&class_eval, iou_threshold);
                for (d_idx, det) in class_eval.detections.iter().enumerate() {
                    records.push((det.score, matched[d_idx].is_some()));
                }
            }
            records
                .sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
            for (_, is_tp) in &records {
                if *is_tp {
                    tp += 1;
                } else {
                    fp += 1;
                }
                points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
            }
            // area under the interpolated curve (precision envelope)
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..points.len() {
                let envelope = points[i..].iter().map(|(_, p)| *p).fold(0.0, f64::max);
                let (recall, _) = points[i];
                if recall > prev_recall {
                    ap += (recall - prev_recall) * envelope;
                    prev_recall = recall;
                }
            }
            Some(ap)
        })
        .collect()
}

/// Precision-recall points of one class at one IoU threshold (pooled over
/// images, score-ordered), for curve rendering.
pub fn pr_curve(images: &[ImageEval], class: usize, iou_threshold: f64) -> Vec<(f64, f64)> {
    let n_gt: usize = images
        .iter()
        .map(|e| e.truths.iter().filter(|t| t.class_id == class).count())
        .sum();
    if n_gt == 0 {
        return Vec::new();
    }
    let mut records: Vec<(f64, bool)> = Vec::new();
    for eval in images {
        let class_eval = ImageEval {
            detections: eval
                .detections
                .iter()
                .filter(|d| d.class_id == class)
                .cloned()
                .collect(),
            truths: eval
                .truths
                .iter()
                .filter(|t| t.class_id == class)
                .cloned()
                .collect(),
        };
        let matched = match_greedy(&class_eval, iou_threshold);
        for (d_idx, det) in class_eval.detections.iter().enumerate() {
            records.push((det.score, matched[d_idx].is_some()));
        }
    }
    records.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    records
        .iter()
        .map(|(_, is_tp)| {
            if *is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// Mean AP over IoU thresholds 0.50, 0.55, …, 0.95.
pub fn mean_average_precision(images: &[ImageEval], classes: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..10 {
        sum += average_precision(images, classes, 0.5 + 0.05 * i as f64);
    }
    sum / 10.0
}

/// Mean absolute distance (millimeters) and absolute relative difference
/// (percent) between predicted and true depth over the plate pixels.
pub fn depth_mad_ard(
    pred: &DepthMap,
    gt: &DepthMap,
    plate: &Mask,
) -> Result<(f64, f64), MetricsError> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(MetricsError::SizeMismatch {
            pred_w: pred.width(),
            pred_h: pred.height(),
            gt_w: gt.width(),
            gt_h: gt.height(),
        });
    }
    let mut mad = 0.0;
    let mut ard = 0.0;
    let mut count = 0usize;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if !plate.get(x, y) {
                continue;
            }
            let (p, g) = (pred.get(x, y), gt.get(x, y));
            mad += (p - g).abs() * 1000.0;
            if g > 0.0 {
                ard += (p - g).abs() / g * 100.0;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyPlate);
    }
    Ok((mad / count as f64, ard / count as f64))
}

/// Per-item volume percentage error: matched items (mask IoU ≥ 0.5, greedy
/// by score) contribute |v̂ − v*|/v*·100; unmatched ground-truth items count
/// as 100%.
pub fn volume_ape(images: &[ImageEval]) -> f64 {
    let mut total = 0.0;
    let mut items = 0usize;
    for eval in images {
        let matched = match_greedy(eval, 0.5);
        let mut truth_error: Vec<Option<f64>> = vec![None; eval.truths.len()];
        for (d_idx, det) in eval.detections.iter().enumerate() {
            if let Some(t_idx) = matched[d_idx] {
                let v_star = eval.truths[t_idx].volume_ml;
                truth_error[t_idx] = Some((det.volume_ml - v_star).abs() / v_star * 100.0);
            }
        }
        for err in truth_error {
            total += err.unwrap_or(100.0);
            items += 1;
        }
    }
    if items == 0 {
        0.0
    } else {
        total / items as f64
    }
}

/// The full evaluation report; percentages in [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f_sum: f64,
    pub f_min: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub confusion: ConfusionMatrix,
    pub mad_mm: f64,
    pub ard_percent: f64,
    pub volume_ape_percent: f64,
    pub mean_inference_seconds: f64,
    pub images_evaluated: usize,
}

/// Inputs for one image's contribution to a report.
pub struct ImageResult {
    pub eval: ImageEval,
    pub pred_depth: DepthMap,
    pub gt_depth: DepthMap,
    pub plate: Mask,
    pub inference_seconds: f64,
}

/// Aggregates per-image results into the report. F indices and depth errors
/// average per image; AP and volume APE pool across the set.
pub fn build_report(
    results: &[ImageResult],
    classes: usize,
) -> Result<MetricsReport, MetricsError> {
    assert!(!results.is_empty(), "no images to evaluate");
    let mut f_sum = 0.0;
    let mut f_min = 0.0;
    let mut mad = 0.0;
    let mut ard = 0.0;
    let mut secs = 0.0;
    for r in results {
        let predicted: SegmentSet = r.eval.detections.iter().map(|d| d.mask.clone()).collect();
        let truth: SegmentSet = r.eval.truths.iter().map(|t| t.mask.clone()).collect();
        let (fs, fm) = f_metrics(&predicted, &truth);
        f_sum += fs;
        f_min += fm;
        let (m, a) = depth_mad_ard(&r.pred_depth, &r.gt_depth, &r.plate)?;
        mad += m;
        ard += a;
        secs += r.inference_seconds;
    }
    let n = results.len() as f64;
    let images: Vec<ImageEval> = results.iter().map(|r| r.eval.clone()).collect();
    Ok(MetricsReport {
        f_sum: f_sum / n * 100.0,
        f_min: f_min / n * 100.0,
        ap50: average_precision(&images, classes, 0.5) * 100.0,
        ap75: average_precision(&images, classes, 0.75) * 100.0,
        map: mean_average_precision(&images, classes) * 100.0,
        confusion: confusion(&images, classes),
        mad_mm: mad / n,
        ard_percent: ard / n,
        volume_ape_percent: volume_ape(&images),
        mean_inference_seconds: secs / n,
        images_evaluated: results.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn block(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh)
    }

    #[test]
    fn identical_single_mask_scores_one() {
        let a = vec![block(8, 8, 2, 2, 3, 3)];
        assert_eq!(ni_directional(&a, &a, NiMode::Min), 1.0);
        assert_eq!(ni_directional(&a, &a, NiMode::Sum), 1.0);
        let (fs, fm) = f_metrics(&a, &a);
        assert_eq!((fs, fm), (1.0, 1.0));
    }

    #[test]
    fn shifted_block_overlap_is_half() {
        // 2x2 block against the same block shifted by one pixel: overlap 2 of 4
        let a = vec![block(8, 8, 2, 2, 2, 2)];
        let b = vec![block(8, 8, 3, 2, 2, 2)];
        assert!((ni_directional(&a, &b, NiMode::Min) - 0.5).abs() < 1e-12);
        assert!((ni_directional(&a, &b, NiMode::Sum) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_set_scores_zero() {
        let truth = vec![block(8, 8, 1, 1, 3, 3)];
        assert_eq!(ni_directional(&Vec::new(), &truth, NiMode::Sum), 0.0);
        let (fs, fm) = f_metrics(&Vec::new(), &truth);
        assert_eq!((fs, fm), (0.0, 0.0));
    }

    #[test]
    fn f_combine_values_and_bounds() {
        assert_eq!(f_combine(1.0, 1.0), 1.0);
        assert_eq!(f_combine(0.5, 0.5), 0.5);
        assert_eq!(f_combine(1.0, 0.0), 0.0);
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (a, b) = (rng.uniform(), rng.uniform());
            let f = f_combine(a, b);
            assert!(f >= 0.0 && f <= 2.0 * a.min(b) + 1e-15);
            assert!(f <= (a + b) / 2.0 + 1e-15);
            assert!((f - f_combine(b, a)).abs() < 1e-15);
        }
    }

    #[test]
    fn ni_matches_brute_force_pixel_loops() {
        let mut rng = Rng::seed_from_u64(7);
        for _ in 0..120 {
            let (w, h) = (4 + rng.below(13), 4 + rng.below(13));
            let n_a = 1 + rng.below(4);
            let n_b = 1 + rng.below(4);
            let mut masks = |rng: &mut Rng, n: usize| -> SegmentSet {
                (0..n)
                    .map(|_| Mask::from_fn(w, h, |_, _| rng.chance(0.25)))
                    .collect()
            };
            let a = masks(&mut rng, n_a);
            let b = masks(&mut rng, n_b);
            for mode in [NiMode::Min, NiMode::Sum] {
                let fast = ni_directional(&a, &b, mode);
                // brute force with explicit per-pixel loops
                let mut per_segment = Vec::new();
                for ai in &a {
                    let mut best = 0.0f64;
                    for bj in &b {
                        let mut inter = 0;
                        for y in 0..h {
                            for x in 0..w {
                                if ai.get(x, y) && bj.get(x, y) {
                                    inter += 1;
                                }
                            }
                        }
                        best = best.max(inter as f64);
                    }
                    per_segment.push((best, ai.area() as f64));
                }
                let slow = match mode {
                    NiMode::Min => per_segment
                        .iter()
                        .map(|(o, area)| if *area > 0.0 { o / area } else { 0.0 })
                        .fold(f64::INFINITY, f64::min),
                    NiMode::Sum => {
                        let total: f64 = per_segment.iter().map(|(_, a)| a).sum();
                        if total == 0.0 {
                            0.0
                        } else {
                            per_segment.iter().map(|(o, _)| o).sum::<f64>() / total
                        }
                    }
                };
                assert!((fast - slow).abs() < 1e-12, "mode {mode:?}");
            }
        }
    }

    #[test]
    fn perfect_detections_have_unit_ap_and_identity_confusion() {
        let mut images = Vec::new();
        for i in 0..4 {
            let truths: Vec<TruthSegment> = (0..3)
                .map(|c| TruthSegment {
                    class_id: c,
                    mask: block(16, 16, c * 5, i, 4, 4),
                    volume_ml: 50.0 + c as f64,
                })
                .collect();
            let detections = truths
                .iter()
                .map(|t| ScoredSegment {
                    class_id: t.class_id,
                    score: 0.9,
                    mask: t.mask.clone(),
                    volume_ml: t.volume_ml,
                })
                .collect();
            images.push(ImageEval { detections, truths });
        }
        assert_eq!(average_precision(&images, 3, 0.5), 1.0);
        assert_eq!(mean_average_precision(&images, 3), 1.0);
        let matrix = confusion(&images, 3);
        for c in 0..3 {
            assert_eq!(matrix.at(c, c), 4);
            assert_eq!(matrix.missed(c), 0);
        }
        assert_eq!(matrix.mean_diagonal_percent(), 100.0);
        assert_eq!(volume_ape(&images), 0.0);
    }

    #[test]
    fn all_wrong_class_scores_zero_ap() {
        let truths = vec![TruthSegment {
            class_id: 0,
            mask: block(16, 16, 2, 2, 6, 6),
            volume_ml: 50.0,
        }];
        let detections = vec![ScoredSegment {
            class_id: 1,
            score: 0.99,
            mask: block(16, 16, 2, 2, 6, 6),
            volume_ml: 50.0,
        }];
        let images = vec![ImageEval { detections, truths }];
        assert_eq!(average_precision(&images, 2, 0.5), 0.0);
    }

    fn random_scene_set(rng: &mut Rng, n_images: usize) -> Vec<ImageEval> {
        (0..n_images)
            .map(|_| {
                let n_truth = 1 + rng.below(4);
                let truths: Vec<TruthSegment> = (0..n_truth)
                    .map(|_| TruthSegment {
                        class_id: rng.below(4),
                        mask: block(
                            16,
                            16,
                            rng.below(10),
                            rng.below(10),
                            2 + rng.below(5),
                            2 + rng.below(5),
                        ),
                        volume_ml: rng.range(20.0, 120.0),
                    })
                    .collect();
                let n_det = rng.below(8);
                let detections: Vec<ScoredSegment> = (0..n_det)
                    .map(|_| ScoredSegment {
                        class_id: rng.below(4),
                        score: rng.uniform(),
                        mask: block(
                            16,
                            16,
                            rng.below(10),
                            rng.below(10),
                            2 + rng.below(5),
                            2 + rng.below(5),
                        ),
                        volume_ml: rng.range(20.0, 120.0),
                    })
                    .collect();
                ImageEval { detections, truths }
            })
            .collect()
    }

    #[test]
    fn map_never_exceeds_ap50() {
        let mut rng = Rng::seed_from_u64(21);
        for _ in 0..60 {
            let images = random_scene_set(&mut rng, 3);
            let ap50 = average_precision(&images, 4, 0.5);
            let map = mean_average_precision(&images, 4);
            assert!(map <= ap50 + 1e-12, "map {map} > ap50 {ap50}");
        }
    }

    /// Brute-force AP: same definition, written as explicit scalar loops
    /// with a fresh matcher, independent of the library path.
    fn reference_ap(images: &[ImageEval], classes: usize, threshold: f64) -> f64 {
        let mut aps = Vec::new();
        for class in 0..classes {
            let mut n_gt = 0;
            for e in images {
                for t in &e.truths {
                    if t.class_id == class {
                        n_gt += 1;
                    }
                }
            }
            if n_gt == 0 {
                continue;
            }
            let mut records: Vec<(f64, bool)> = Vec::new();
            for e in images {
                let dets: Vec<&ScoredSegment> = e
                    .detections
                    .iter()
                    .filter(|d| d.class_id == class)
                    .collect();
                let gts: Vec<&TruthSegment> =
                    e.truths.iter().filter(|t| t.class_id == class).collect();
                let mut order: Vec<usize> = (0..dets.len()).collect();
                order.sort_by(|&a, &b| {
                    dets[b]
                        .score
                        .partial_cmp(&dets[a].score)
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let mut used = vec![false; gts.len()];
                for &d in &order {
                    let mut best_iou = -1.0;
                    let mut best_gt = None;
                    for (g, gt) in gts.iter().enumerate() {
                        if used[g] {
                            continue;
                        }
                        let mut inter = 0usize;
                        let mut uni = 0usize;
                        for y in 0..16 {
                            for x in 0..16 {
                                let a = dets[d].mask.get(x, y);
                                let b = gt.mask.get(x, y);
                                if a && b {
                                    inter += 1;
                                }
                                if a || b {
                                    uni += 1;
                                }
                            }
                        }
                        let iou = if uni == 0 {
                            0.0
                        } else {
                            inter as f64 / uni as f64
                        };
                        if iou >= threshold && iou > best_iou {
                            best_iou = iou;
                            best_gt = Some(g);
                        }
                    }
                    let tp = if let Some(g) = best_gt {
                        used[g] = true;
                        true
                    } else {
                        false
                    };
                    records.push((dets[d].score, tp));
                }
            }
            records.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut curve: Vec<(f64, f64)> = Vec::new();
            for (_, is_tp) in &records {
                if *is_tp {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                curve.push((tp / n_gt as f64, tp / (tp + fp)));
            }
            let mut ap = 0.0;
            let mut prev = 0.0;
            for i in 0..curve.len() {
                let mut envelope = 0.0;
                for j in i..curve.len() {
                    if curve[j].1 > envelope {
                        envelope = curve[j].1;
                    }
                }
                if curve[i].0 > prev {
                    ap += (curve[i].0 - prev) * envelope;
                    prev = curve[i].0;
                }
            }
            aps.push(ap);
        }
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }

    #[test]
    fn ap_matches_reference_matcher_on_random_scenes() {
        let mut rng = Rng::seed_from_u64(5);
        for trial in 0..40 {
            let n_images = 1 + rng.below(4);
            let images = random_scene_set(&mut rng, n_images);
            for threshold in [0.5, 0.75] {
                let fast = average_precision(&images, 4, threshold);
                let slow = reference_ap(&images, 4, threshold);
                assert!(
                    (fast - slow).abs() < 1e-9,
                    "trial {trial} threshold {threshold}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn depth_errors_for_constant_offset() {
        let gt = DepthMap::constant(16, 16, 0.4);
        let pred = DepthMap::constant(16, 16, 0.405);
        let plate = Mask::from_fn(16, 16, |x, y| x > 2 && y > 2);
        let (mad, ard) = depth_mad_ard(&pred, &gt, &plate).unwrap();
        assert!((mad - 5.0).abs() < 1e-9, "mad={mad}");
        assert!((ard - 1.25).abs() < 1e-9, "ard={ard}");
        let (zero_mad, zero_ard) = depth_mad_ard(&gt, &gt, &plate).unwrap();
        assert_eq!((zero_mad, zero_ard), (0.0, 0.0));
        assert!(matches!(
            depth_mad_ard(&pred, &gt, &Mask::zeros(16, 16)),
            Err(MetricsError::EmptyPlate)
        ));
    }

    #[test]
    fn depth_errors_match_scalar_loop() {
        let mut rng = Rng::seed_from_u64(11);
        let gt = DepthMap::new(8, 8, (0..64).map(|_| rng.range(0.3, 0.6)).collect()).unwrap();
        let pred = DepthMap::new(8, 8, (0..64).map(|_| rng.range(0.3, 0.6)).collect()).unwrap();
        let plate = Mask::from_fn(8, 8, |_, _| rng.chance(0.7));
        let (mad, ard) = depth_mad_ard(&pred, &gt, &plate).unwrap();
        let mut s_mad = 0.0;
        let mut s_ard = 0.0;
        let mut n = 0;
        for y in 0..8 {
            for x in 0..8 {
                if plate.get(x, y) {
                    s_mad += (pred.get(x, y) - gt.get(x, y)).abs() * 1000.0;
                    s_ard += (pred.get(x, y) - gt.get(x, y)).abs() / gt.get(x, y) * 100.0;
                    n += 1;
                }
            }
        }
        assert!((mad - s_mad / n as f64).abs() < 1e-9);
        assert!((ard - s_ard / n as f64).abs() < 1e-9);
    }

    #[test]
    fn volume_ape_handbuilt_scene() {
        // three items: matched with 19% and 10% error, one missed (100%)
        let truths = vec![
            TruthSegment {
                class_id: 0,
                mask: block(16, 16, 0, 0, 4, 4),
                volume_ml: 100.0,
            },
            TruthSegment {
                class_id: 1,
                mask: block(16, 16, 6, 0, 4, 4),
                volume_ml: 50.0,
            },
            TruthSegment {
                class_id: 2,
                mask: block(16, 16, 12, 0, 4, 4),
                volume_ml: 80.0,
            },
        ];
        let detections = vec![
            ScoredSegment {
                class_id: 0,
                score: 0.9,
                mask: block(16, 16, 0, 0, 4, 4),
                volume_ml: 119.0,
            },
            ScoredSegment {
                class_id: 1,
                score: 0.8,
                mask: block(16, 16, 6, 0, 4, 4),
                volume_ml: 45.0,
            },
        ];
        let images = vec![ImageEval { detections, truths }];
        let ape = volume_ape(&images);
        let expected = (19.0 + 10.0 + 100.0) / 3.0;
        assert!((ape - expected).abs() < 1e-9, "ape={ape}");
    }

    fn translate(mask: &Mask, dx: usize, dy: usize) -> Mask {
        Mask::from_fn(mask.width(), mask.height(), |x, y| {
            x >= dx && y >= dy && mask.get(x - dx, y - dy)
        })
    }

    #[test]
    fn metrics_invariant_under_common_translation() {
        // masks stay away from the border, so a common shift preserves all
        // pairwise overlaps and every metric
        let mut rng = Rng::seed_from_u64(13);
        for _ in 0..20 {
            let images = random_scene_set(&mut rng, 2);
            let shifted: Vec<ImageEval> = images
                .iter()
                .map(|e| ImageEval {
                    detections: e
                        .detections
                        .iter()
                        .map(|d| ScoredSegment {
                            class_id: d.class_id,
                            score: d.score,
                            mask: translate(&d.mask, 1, 1),
                            volume_ml: d.volume_ml,
                        })
                        .collect(),
                    truths: e
                        .truths
                        .iter()
                        .map(|t| TruthSegment {
                            class_id: t.class_id,
                            mask: translate(&t.mask, 1, 1),
                            volume_ml: t.volume_ml,
                        })
                        .collect(),
                })
                .collect();
            let a50 = average_precision(&images, 4, 0.5);
            let b50 = average_precision(&shifted, 4, 0.5);
            assert!((a50 - b50).abs() < 1e-12);
            let fa = f_metrics(
                &images[0].detections.iter().map(|d| d.mask.clone()).collect(),
                &images[0].truths.iter().map(|t| t.mask.clone()).collect(),
            );
            let fb = f_metrics(
                &shifted[0].detections.iter().map(|d| d.mask.clone()).collect(),
                &shifted[0].truths.iter().map(|t| t.mask.clone()).collect(),
            );
            assert!((fa.0 - fb.0).abs() < 1e-12 && (fa.1 - fb.1).abs() < 1e-12);
        }
    }
}
