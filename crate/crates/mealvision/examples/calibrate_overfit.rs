//! Calibration probe: overfit on 8 scenes with periodic metric checks.

use std::time::Instant;

use mealvision::dataset::{generate_scene_captures, PoseTag, Sample, SceneConfig};
use mealvision::losses::LossConfig;
use mealvision::metrics::{build_report, ImageEval, ImageResult, ScoredSegment, TruthSegment};
use mealvision::model::{MealNet, ModelConfig};
use mealvision::trainer::{TrainConfig, Trainer};

const PATTERN: [PoseTag; 6] = [
    PoseTag::Fixed90,
    PoseTag::Fixed90,
    PoseTag::Fixed60,
    PoseTag::Fixed60,
    PoseTag::Random,
    PoseTag::Random,
];

fn evaluate(net: &MealNet<f32>, samples: &[Sample]) -> (f64, f64, f64) {
    let results: Vec<ImageResult> = samples
        .iter()
        .map(|s| {
            let (out, dur) = net.forward_infer(&s.rgb, &s.camera).unwrap();
            ImageResult {
                eval: ImageEval {
                    detections: out
                        .detections
                        .iter()
                        .map(|d| ScoredSegment {
                            class_id: d.class_id,
                            score: d.score,
                            mask: d.mask.clone(),
                            volume_ml: d.volume_ml,
                        })
                        .collect(),
                    truths: s
                        .instances
                        .iter()
                        .map(|i| TruthSegment {
                            class_id: i.class_id,
                            mask: i.mask.clone(),
                            volume_ml: i.volume_ml,
                        })
                        .collect(),
                },
                pred_depth: out.depth_predictions[3].clone(),
                gt_depth: s.depth_gt.clone(),
                plate: s.plate_mask.clone(),
                inference_seconds: dur.as_secs_f64(),
            }
        })
        .collect();
    let report = build_report(&results, net.cfg.num_foreground()).unwrap();
    (report.ap50, report.mad_mm, report.volume_ape_percent)
}

fn main() {
    if std::env::args().any(|a| a == "--depth-only") {
        mealvision::trainer::DEPTH_ONLY.store(true, std::sync::atomic::Ordering::Relaxed);
        println!("depth-only mode");
    }
    let t0 = Instant::now();
    let scene_cfg = SceneConfig::default();
    let mut samples = Vec::new();
    for scene in 0..8u64 {
        samples.extend(generate_scene_captures(1000 + scene, &PATTERN, &scene_cfg).unwrap());
    }
    println!("dataset: {} samples in {:.1}s", samples.len(), t0.elapsed().as_secs_f64());

    let net = MealNet::<f32>::new(ModelConfig::desk(), 7).unwrap();
    let config = TrainConfig {
        total_iterations: 3000,
        batch_size: 1,
        seed: 7,
        checkpoint_every: 0,
        validate_every: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(net, config, LossConfig::default());
    let mut first_loss = None;
    let mut loss_at_500 = None;
    while trainer.iteration() < 3000 {
        let l = trainer.step(&samples).unwrap();
        if trainer.iteration() == 1 {
            first_loss = Some(l.total);
        }
        if trainer.iteration() == 500 {
            loss_at_500 = Some(l.total);
        }
        if trainer.iteration() % 100 == 0 {
            println!(
                "iter {:4} lr {:.0e} total {:8.2} cls {:6.2} bbox {:6.2} mask {:5.2} vol {:6.2} d3 {:.4} [{:.0}s]",
                trainer.iteration(),
                trainer.current_lr(),
                l.total,
                l.cls,
                l.bbox,
                l.mask,
                l.vol,
                l.depth[3],
                t0.elapsed().as_secs_f64()
            );
        }
        if [600, 1200, 2000, 3000].contains(&trainer.iteration()) {
            let (ap50, mad, ape) = evaluate(&trainer.net, &samples);
            println!(
                ">>> iter {}: AP50 {:.1}% MAD {:.2}mm APE {:.1}% [{:.0}s]",
                trainer.iteration(),
                ap50,
                mad,
                ape,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    println!(
        "first loss {:.1}, loss@500 {:.1} (ratio {:.2})",
        first_loss.unwrap(),
        loss_at_500.unwrap(),
        loss_at_500.unwrap() / first_loss.unwrap()
    );
    println!("total wall: {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
}
