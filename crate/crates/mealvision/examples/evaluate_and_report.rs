//! Evaluates a quick-trained checkpoint on the three test regimes and
//! renders the report plots.

use mealvision::config::RunConfig;
use mealvision::dataset::TestSplit;
use mealvision::runner::{cmd_evaluate, cmd_gen_data, cmd_report, cmd_train};

fn main() {
    let root = std::env::temp_dir().join("mealvision-example-eval");
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
        ("train.total_iterations", "150"),
        ("train.batch_size", "1"),
    ] {
        config.set(k, v, 0).unwrap();
    }
    config.finish().unwrap();

    cmd_gen_data(&config, &data, 6, 5).unwrap();
    let outcome = cmd_train(&config, &data, &run, None).unwrap();

    for split in [TestSplit::Fixed, TestSplit::Free, TestSplit::Full] {
        let report = cmd_evaluate(&outcome.checkpoint, &data, split, &run).unwrap();
        println!(
            "{split:?}: F_sum {:.1}% AP50 {:.1}% MAD {:.1}mm APE {:.1}% ({:.3} s/img)",
            report.f_sum,
            report.ap50,
            report.mad_mm,
            report.volume_ape_percent,
            report.mean_inference_seconds
        );
    }
    let plots = cmd_report(
        Some(&outcome.log_path),
        &[run.join("report_full.json")],
        &run.join("plots"),
    )
    .unwrap();
    for p in plots.plots {
        println!("wrote {}", p.display());
    }
}
