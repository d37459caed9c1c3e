//! Miniature end-to-end run: generate a few scenes, train briefly at low
//! resolution, then predict on one capture and write the overlay.
//!
//! This is a fast demonstration, not a converged model — expect partial
//! detections. The acceptance suite runs the full overfit protocol.

use mealvision::config::RunConfig;
use mealvision::runner::{cmd_gen_data, cmd_predict, cmd_train};

fn main() {
    let root = std::env::temp_dir().join("mealvision-example-run");
    let _ = std::fs::remove_dir_all(&root);
    let data = root.join("data");
    let run = root.join("run");

    let mut config = RunConfig::default();
    for (k, v) in [
        ("scene.resolution", "96"),
        ("model.input_size", "96"),
        ("model.backbone_channels", "16"),
        ("model.stage_channels", "8,16,16,32"),
        ("model.depth_decoder_channels", "8"),
        ("model.volume_head_width", "16"),
        ("train.total_iterations", "120"),
        ("train.batch_size", "1"),
        ("train.checkpoint_every", "0"),
    ] {
        config.set(k, v, 0).unwrap();
    }
    config.finish().unwrap();

    println!("generating 4 scenes...");
    cmd_gen_data(&config, &data, 4, 1).unwrap();

    println!("training 120 iterations at 96x96...");
    let outcome = cmd_train(&config, &data, &run, None).unwrap();
    println!(
        "trained {} iterations in {:.1}s",
        outcome.summary.iterations_run, outcome.summary.wall_seconds
    );

    let image = data.join("scene0000_cap0/rgb.png");
    let predict_out = run.join("prediction");
    let result = cmd_predict(&outcome.checkpoint, &image, &predict_out).unwrap();
    println!(
        "{} detections; see {} and {}",
        result.detections,
        result.overlay.display(),
        result.result.display()
    );
}
