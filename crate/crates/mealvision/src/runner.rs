//! Batch entry points behind the CLI and the examples: dataset generation,
//! training, evaluation, single-image prediction, and report rendering.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    generate_scene_captures, load_manifest, load_sample, make_splits, save_manifest, save_sample,
    DataError, PoseTag, Rgb8Image, Sample, SampleRef, TestSplit,
};
use crate::losses::LossBreakdown;
use crate::mask::Rle;
use crate::metrics::{
    build_report, ImageEval, ImageResult, MetricsReport, ScoredSegment, TruthSegment,
};
use crate::model::{load_checkpoint_file, CheckpointError, MealNet, ModelError};
use crate::trainer::{train_loop, LogRecord, TrainConfig, TrainError, Trainer, TrainSummary};
use crate::viz;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("scene generation failed: {0}")]
    Scene(#[from] crate::dataset::SceneError),
    #[error("split error: {0}")]
    Split(#[from] crate::dataset::SplitError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("metrics error: {0}")]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("split '{0}' has no samples")]
    EmptySplit(String),
    #[error("training log line {line} is malformed: {reason}")]
    BadLog { line: usize, reason: String },
}

impl RunnerError {
    /// Process exit code: 1 usage/config, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) | RunnerError::Model(_) => 1,
            RunnerError::Train(TrainError::Diverged { .. }) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> RunnerError {
    RunnerError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn echo_config(config: &RunConfig, dir: &Path) -> Result<(), RunnerError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("config.resolved.txt");
    std::fs::write(&path, config.to_document()).map_err(|e| io_err(&path, e))
}

/// The capture pattern of one scene: four fixed-pose plus two random-pose
/// samples.
pub const CAPTURE_PATTERN: [PoseTag; 6] = [
    PoseTag::Fixed90,
    PoseTag::Fixed90,
    PoseTag::Fixed60,
    PoseTag::Fixed60,
    PoseTag::Random,
    PoseTag::Random,
];

pub struct GenSummary {
    pub scenes: usize,
    pub samples: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
}

/// Generates `count` scenes (6 captures each) under `out_dir` with a
/// 6:1:1 scene-level split manifest.
pub fn cmd_gen_data(
    config: &RunConfig,
    out_dir: &Path,
    count: usize,
    seed: u64,
) -> Result<GenSummary, RunnerError> {
    let mut config = config.clone();
    config.finish()?;
    echo_config(&config, out_dir)?;
    let mut refs = Vec::with_capacity(count * CAPTURE_PATTERN.len());
    for scene in 0..count {
        let scene_seed = seed.wrapping_add(scene as u64);
        let captures = generate_scene_captures(scene_seed, &CAPTURE_PATTERN, &config.scene)?;
        for (cap, sample) in captures.iter().enumerate() {
            let rel = format!("scene{scene:04}_cap{cap}");
            save_sample(sample, &out_dir.join(&rel))?;
            refs.push(SampleRef {
                path: rel,
                scene: scene as u64,
                pose: CAPTURE_PATTERN[cap],
            });
        }
    }
    let manifest = make_splits(&refs, (0.75, 0.125, 0.125), seed)?;
    save_manifest(&manifest, out_dir)?;
    let scenes_of = |v: &[SampleRef]| {
        let mut s: Vec<u64> = v.iter().map(|r| r.scene).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    Ok(GenSummary {
        scenes: count,
        samples: refs.len(),
        train_scenes: scenes_of(&manifest.train),
        val_scenes: scenes_of(&manifest.val),
        test_scenes: scenes_of(&manifest.test),
    })
}

fn load_split(dataset_dir: &Path, refs: &[SampleRef]) -> Result<Vec<Sample>, RunnerError> {
    refs.iter()
        .map(|r| load_sample(&dataset_dir.join(&r.path)).map_err(RunnerError::from))
        .collect()
}

/// Quick AP50 on a sample list, used for validation during training.
pub fn quick_ap50(net: &MealNet<f32>, samples: &[Sample]) -> f64 {
    let images: Vec<ImageEval> = samples
        .iter()
        .filter_map(|s| {
            let (outputs, _) = net.forward_infer(&s.rgb, &s.camera).ok()?;
            Some(image_eval(s, &outputs.detections))
        })
        .collect();
    crate::metrics::average_precision(&images, net.cfg.num_foreground(), 0.5) * 100.0
}

fn image_eval(sample: &Sample, detections: &[crate::model::Detection]) -> ImageEval {
    ImageEval {
        detections: detections
            .iter()
            .map(|d| ScoredSegment {
                class_id: d.class_id,
                score: d.score,
                mask: d.mask.clone(),
                volume_ml: d.volume_ml,
            })
            .collect(),
        truths: sample
            .instances
            .iter()
            .map(|inst| TruthSegment {
                class_id: inst.class_id,
                mask: inst.mask.clone(),
                volume_ml: inst.volume_ml,
            })
            .collect(),
    }
}

pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Trains on the manifest's train split; resumable via a previous
/// checkpoint. Writes `train_log.jsonl`, `timing.jsonl` and
/// `checkpoint.ckpt` into `out_dir`.
pub fn cmd_train(
    config: &RunConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, RunnerError> {
    let mut config = config.clone();
    config.finish()?;
    let manifest = load_manifest(dataset_dir)?;
    if manifest.train.is_empty() {
        return Err(RunnerError::EmptySplit("train".into()));
    }
    echo_config(&config, out_dir)?;
    let train_set = load_split(dataset_dir, &manifest.train)?;
    let val_set = load_split(dataset_dir, &manifest.val)?;

    let mut trainer = match resume {
        Some(path) => {
            // everything resumes from the checkpoint; only the target
            // iteration count follows the invoking configuration
            let mut t = Trainer::resume(path)?;
            t.config.total_iterations = config.train.total_iterations;
            t
        }
        None => {
            let net = MealNet::<f32>::new(config.model.clone(), config.train.seed)?;
            Trainer::new(net, config.train.clone(), config.loss)
        }
    };
    let log_path = out_dir.join("train_log.jsonl");
    let timing_path = out_dir.join("timing.jsonl");
    let append = resume.is_some();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut timing = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&timing_path)
        .map_err(|e| io_err(&timing_path, e))?;
    let checkpoint = out_dir.join("checkpoint.ckpt");
    let summary = train_loop(
        &mut trainer,
        &train_set,
        &val_set,
        &mut log,
        &mut timing,
        Some(&checkpoint),
        |net, val| Some(quick_ap50(net, val)),
    )?;
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome {
        summary,
        checkpoint,
        log_path,
    })
}

/// Sidecar detail written next to each metrics report: per-class PR points
/// at IoU 0.5 and per-image inference seconds.
#[derive(Serialize, Deserialize)]
pub struct EvaluationDetails {
    pub per_image_seconds: Vec<f64>,
    pub pr50: Vec<ClassPr>,
}

#[derive(Serialize, Deserialize)]
pub struct ClassPr {
    pub class_id: usize,
    pub points: Vec<(f64, f64)>,
}

/// Evaluates a checkpoint on one test split and writes
/// `report_<split>.json` plus `details_<split>.json` into `out_dir`.
pub fn cmd_evaluate(
    checkpoint: &Path,
    dataset_dir: &Path,
    split: TestSplit,
    out_dir: &Path,
) -> Result<MetricsReport, RunnerError> {
    let (net, _) = load_checkpoint_file(checkpoint)?;
    let manifest = load_manifest(dataset_dir)?;
    let refs = manifest.select_test(split);
    if refs.is_empty() {
        return Err(RunnerError::EmptySplit(format!("{split:?}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut results = Vec::with_capacity(refs.len());
    for r in &refs {
        let sample = load_sample(&dataset_dir.join(&r.path))?;
        let (outputs, elapsed) = net.forward_infer(&sample.rgb, &sample.camera)?;
        results.push(ImageResult {
            eval: image_eval(&sample, &outputs.detections),
            pred_depth: outputs.depth_predictions[3].clone(),
            gt_depth: sample.depth_gt.clone(),
            plate: sample.plate_mask.clone(),
            inference_seconds: elapsed.as_secs_f64(),
        });
    }
    let classes = net.cfg.num_foreground();
    let report = build_report(&results, classes)?;
    let split_name = format!("{split:?}").to_lowercase();
    let report_path = out_dir.join(format!("report_{split_name}.json"));
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| io_err(&report_path, e))?;

    let images: Vec<ImageEval> = results.iter().map(|r| r.eval.clone()).collect();
    let details = EvaluationDetails {
        per_image_seconds: results.iter().map(|r| r.inference_seconds).collect(),
        pr50: (0..classes)
            .map(|class_id| ClassPr {
                class_id,
                points: crate::metrics::pr_curve(&images, class_id, 0.5),
            })
            .collect(),
    };
    let details_path = out_dir.join(format!("details_{split_name}.json"));
    std::fs::write(
        &details_path,
        serde_json::to_string_pretty(&details).expect("details serialize"),
    )
    .map_err(|e| io_err(&details_path, e))?;
    Ok(report)
}

#[derive(Serialize)]
struct PredictionDoc {
    detections: Vec<DetectionDoc>,
}

#[derive(Serialize)]
struct DetectionDoc {
    class_id: usize,
    class_name: String,
    score: f64,
    bbox: [usize; 4],
    volume_ml: f64,
    mask: Rle,
}

pub struct PredictOutcome {
    pub detections: usize,
    pub overlay: PathBuf,
    pub result: PathBuf,
}

/// Runs single-image prediction: writes a labeled overlay, the four depth
/// maps as grayscale images, and a structured result document.
pub fn cmd_predict(
    checkpoint: &Path,
    image_path: &Path,
    out_dir: &Path,
) -> Result<PredictOutcome, RunnerError> {
    let (net, _) = load_checkpoint_file(checkpoint)?;
    let img = image::open(image_path)
        .map_err(|e| RunnerError::Image {
            path: image_path.display().to_string(),
            source: e,
        })?
        .into_rgb8();
    let rgb = fit_to_input(
        &Rgb8Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        },
        net.cfg.input_size,
    );
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let (outputs, elapsed) = net.forward_infer(&rgb, &net.cfg.camera)?;
    let class_names: Vec<String> = crate::dataset::default_catalog()
        .into_iter()
        .map(|c| c.name)
        .collect();
    let overlay = viz::render_overlay(&rgb, &outputs.detections, &class_names);
    let overlay_path = out_dir.join("overlay.png");
    viz::save_image(&overlay, &overlay_path).map_err(|e| RunnerError::Image {
        path: overlay_path.display().to_string(),
        source: e,
    })?;
    for (i, depth) in outputs.depth_predictions.iter().enumerate() {
        let path = out_dir.join(format!("depth_scale{i}.png"));
        viz::save_image(&viz::depth_to_image(depth), &path).map_err(|e| RunnerError::Image {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    let doc = PredictionDoc {
        detections: outputs
            .detections
            .iter()
            .map(|d| DetectionDoc {
                class_id: d.class_id,
                class_name: class_names
                    .get(d.class_id)
                    .cloned()
                    .unwrap_or_else(|| format!("class{}", d.class_id)),
                score: d.score,
                bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
                volume_ml: d.volume_ml,
                mask: d.mask.to_rle(),
            })
            .collect(),
    };
    let result_path = out_dir.join("result.json");
    std::fs::write(
        &result_path,
        serde_json::to_string_pretty(&doc).expect("result serializes"),
    )
    .map_err(|e| io_err(&result_path, e))?;
    let timing_path = out_dir.join("timing.txt");
    std::fs::write(
        &timing_path,
        format!("inference_seconds = {:.4}\n", elapsed.as_secs_f64()),
    )
    .map_err(|e| io_err(&timing_path, e))?;
    Ok(PredictOutcome {
        detections: outputs.detections.len(),
        overlay: overlay_path,
        result: result_path,
    })
}

/// Center-crops to a square and bilinearly resizes to the network input.
pub fn fit_to_input(rgb: &Rgb8Image, input_size: usize) -> Rgb8Image {
    let side = rgb.width.min(rgb.height);
    let x_off = (rgb.width - side) / 2;
    let y_off = (rgb.height - side) / 2;
    let mut out = Rgb8Image::new(input_size, input_size);
    for y in 0..input_size {
        for x in 0..input_size {
            let fx = (x as f64 + 0.5) / input_size as f64 * side as f64 - 0.5;
            let fy = (y as f64 + 0.5) / input_size as f64 * side as f64 - 0.5;
            let x0 = (fx.floor().max(0.0) as usize).min(side - 1);
            let y0 = (fy.floor().max(0.0) as usize).min(side - 1);
            let x1 = (x0 + 1).min(side - 1);
            let y1 = (y0 + 1).min(side - 1);
            let (lx, ly) = ((fx - x0 as f64).clamp(0.0, 1.0), (fy - y0 as f64).clamp(0.0, 1.0));
            let mut px = [0u8; 3];
            for c in 0..3 {
                let g = |xx: usize, yy: usize| {
                    rgb.get(x_off + xx, y_off + yy)[c] as f64
                };
                let v = g(x0, y0) * (1.0 - lx) * (1.0 - ly)
                    + g(x1, y0) * lx * (1.0 - ly)
                    + g(x0, y1) * (1.0 - lx) * ly
                    + g(x1, y1) * lx * ly;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, px);
        }
    }
    out
}

/// Parses a training log, rejecting malformed lines with their number.
pub fn parse_train_log(text: &str) -> Result<Vec<LogRecord>, RunnerError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str::<LogRecord>(line).map_err(|e| RunnerError::BadLog {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub struct ReportOutcome {
    pub plots: Vec<PathBuf>,
}

/// Renders loss curves from a training log and/or PR curves, confusion
/// heatmap and a comparison table from evaluation outputs.
pub fn cmd_report(
    log: Option<&Path>,
    reports: &[PathBuf],
    out_dir: &Path,
) -> Result<ReportOutcome, RunnerError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut plots = Vec::new();
    if let Some(log_path) = log {
        let text = std::fs::read_to_string(log_path).map_err(|e| io_err(log_path, e))?;
        let records = parse_train_log(&text)?;
        let series = vec![
            viz::Series {
                name: "TOTAL".into(),
                points: records
                    .iter()
                    .map(|r| (r.iteration as f64, r.losses.total))
                    .collect(),
                color: [20, 20, 20],
            },
            viz::Series {
                name: "CLS".into(),
                points: records
                    .iter()
                    .map(|r| (r.iteration as f64, r.losses.cls))
                    .collect(),
                color: [220, 60, 50],
            },
            viz::Series {
                name: "BBOX".into(),
                points: records
                    .iter()
                    .map(|r| (r.iteration as f64, r.losses.bbox))
                    .collect(),
                color: [60, 140, 60],
            },
            viz::Series {
                name: "MASK".into(),
                points: records
                    .iter()
                    .map(|r| (r.iteration as f64, r.losses.mask))
                    .collect(),
                color: [150, 80, 200],
            },
            viz::Series {
                name: "VOL".into(),
                points: records
                    .iter()
                    .map(|r| (r.iteration as f64, r.losses.vol))
                    .collect(),
                color: [230, 150, 40],
            },
            viz::Series {
                name: "DEPTH".into(),
                points: records
                    .iter()
                    .map(|r| (r.iteration as f64, r.losses.depth.iter().sum()))
                    .collect(),
                color: [60, 110, 220],
            },
        ];
        let img = viz::plot_series("TRAINING LOSS", &series, 900, 540);
        let path = out_dir.join("loss_curves.png");
        viz::save_image(&img, &path).map_err(|e| RunnerError::Image {
            path: path.display().to_string(),
            source: e,
        })?;
        plots.push(path);
    }

    let class_names: Vec<String> = crate::dataset::default_catalog()
        .into_iter()
        .map(|c| c.name)
        .collect();
    let mut loaded: Vec<(String, MetricsReport)> = Vec::new();
    for path in reports {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let report: MetricsReport =
            serde_json::from_str(&text).map_err(|e| RunnerError::BadLog {
                line: 0,
                reason: format!("{}: {e}", path.display()),
            })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "report".into());
        // confusion heatmap per report
        let heat = viz::confusion_heatmap(&report.confusion, &class_names);
        let heat_path = out_dir.join(format!("{stem}_confusion.png"));
        viz::save_image(&heat, &heat_path).map_err(|e| RunnerError::Image {
            path: heat_path.display().to_string(),
            source: e,
        })?;
        plots.push(heat_path);
        // PR curves when the details sidecar sits next to the report
        let details_path = path
            .parent()
            .unwrap_or(Path::new("."))
            .join(stem.replace("report", "details") + ".json");
        if let Ok(details_text) = std::fs::read_to_string(&details_path) {
            if let Ok(details) = serde_json::from_str::<EvaluationDetails>(&details_text) {
                let series: Vec<viz::Series> = details
                    .pr50
                    .iter()
                    .map(|pr| viz::Series {
                        name: class_names
                            .get(pr.class_id)
                            .cloned()
                            .unwrap_or_else(|| format!("C{}", pr.class_id))
                            .to_uppercase(),
                        points: pr.points.clone(),
                        color: viz::class_color(pr.class_id),
                    })
                    .collect();
                let img = viz::plot_series("PRECISION-RECALL AT IOU 0.5", &series, 640, 480);
                let pr_path = out_dir.join(format!("{stem}_pr.png"));
                viz::save_image(&img, &pr_path).map_err(|e| RunnerError::Image {
                    path: pr_path.display().to_string(),
                    source: e,
                })?;
                plots.push(pr_path);
            }
        }
        loaded.push((stem, report));
    }
    if !loaded.is_empty() {
        let mut table = String::from(
            "| report | F_sum % | F_min % | AP50 % | AP75 % | mAP % | MAD mm | ARD % | vol APE % | s/image |\n|---|---|---|---|---|---|---|---|---|---|\n",
        );
        for (name, r) in &loaded {
            table.push_str(&format!(
                "| {name} | {:.2} | {:.2} | {:.1} | {:.1} | {:.1} | {:.2} | {:.2} | {:.1} | {:.3} |\n",
                r.f_sum,
                r.f_min,
                r.ap50,
                r.ap75,
                r.map,
                r.mad_mm,
                r.ard_percent,
                r.volume_ape_percent,
                r.mean_inference_seconds,
            ));
        }
        let table_path = out_dir.join("comparison.md");
        std::fs::write(&table_path, table).map_err(|e| io_err(&table_path, e))?;
        plots.push(table_path);
    }
    Ok(ReportOutcome { plots })
}

/// Re-exported loss type for log consumers.
pub type TrainLogRecord = LossBreakdown;

/// Convenience: load every sample of a manifest split.
pub fn load_manifest_split(
    dataset_dir: &Path,
    split: &[SampleRef],
) -> Result<Vec<Sample>, RunnerError> {
    load_split(dataset_dir, split)
}

/// Builds a trainer for a dataset directory without running it; used by the
/// examples.
pub fn make_trainer(config: &RunConfig) -> Result<Trainer, RunnerError> {
    let mut config = config.clone();
    config.finish()?;
    let net = MealNet::<f32>::new(config.model.clone(), config.train.seed)?;
    Ok(Trainer::new(net, config.train.clone(), config.loss))
}

/// The train configuration actually used by a trainer (post-resolution).
pub fn effective_train_config(config: &RunConfig) -> TrainConfig {
    config.train.clone()
}
