//! The evaluation-metric suite on hand-built toy masks.

use mealvision::mask::Mask;
use mealvision::metrics::{
    average_precision, confusion, f_metrics, mean_average_precision, volume_ape, ImageEval,
    ScoredSegment, TruthSegment,
};

fn block(x0: usize, y0: usize, w: usize, h: usize) -> Mask {
    Mask::from_fn(32, 32, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
}

fn main() {
    // ground truth: three items of three classes
    let truths = vec![
        TruthSegment { class_id: 0, mask: block(2, 2, 8, 8), volume_ml: 100.0 },
        TruthSegment { class_id: 1, mask: block(14, 2, 8, 8), volume_ml: 60.0 },
        TruthSegment { class_id: 2, mask: block(2, 14, 8, 8), volume_ml: 80.0 },
    ];
    // predictions: first is perfect, second shifted, third missing, plus a
    // spurious low-score detection
    let detections = vec![
        ScoredSegment { class_id: 0, score: 0.95, mask: block(2, 2, 8, 8), volume_ml: 104.0 },
        ScoredSegment { class_id: 1, score: 0.80, mask: block(16, 2, 8, 8), volume_ml: 75.0 },
        ScoredSegment { class_id: 2, score: 0.30, mask: block(24, 24, 5, 5), volume_ml: 10.0 },
    ];
    let predicted_masks: Vec<Mask> = detections.iter().map(|d| d.mask.clone()).collect();
    let truth_masks: Vec<Mask> = truths.iter().map(|t| t.mask.clone()).collect();

    let (f_sum, f_min) = f_metrics(&predicted_masks, &truth_masks);
    println!("F_sum {:.3}  F_min {:.3}", f_sum, f_min);

    let images = vec![ImageEval { detections, truths }];
    println!("AP50 {:.3}", average_precision(&images, 3, 0.5));
    println!("AP75 {:.3}", average_precision(&images, 3, 0.75));
    println!("mAP  {:.3}", mean_average_precision(&images, 3));
    println!("volume APE {:.1}%", volume_ape(&images));

    let matrix = confusion(&images, 3);
    println!("confusion rows (counts, last column = missed):");
    for row in 0..3 {
        let cells: Vec<u64> = (0..=3).map(|c| matrix.at(row, c)).collect();
        println!("  class {row}: {cells:?}");
    }
}
