//! Generates a small synthetic dataset with a split manifest and prints
//! what landed on disk.

use mealvision::config::RunConfig;
use mealvision::runner::cmd_gen_data;

fn main() {
    let out = std::env::temp_dir().join("mealvision-example-dataset");
    let _ = std::fs::remove_dir_all(&out);
    let config = RunConfig::default();
    let summary = cmd_gen_data(&config, &out, 8, 42).unwrap();
    println!(
        "{} scenes -> {} samples ({} train / {} val / {} test scenes)",
        summary.scenes,
        summary.samples,
        summary.train_scenes,
        summary.val_scenes,
        summary.test_scenes
    );
    println!("dataset at {}", out.display());
    for entry in std::fs::read_dir(out.join("scene0000_cap0")).unwrap() {
        println!("  scene0000_cap0/{}", entry.unwrap().file_name().to_string_lossy());
    }
}
