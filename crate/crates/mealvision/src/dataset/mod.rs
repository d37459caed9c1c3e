//! Synthetic RGB-D meal scenes with analytic ground truth, the on-disk
//! dataset format, and train/validation/test split management.

mod io;
mod scene;

pub use io::{load_manifest, load_sample, save_manifest, save_sample, DataError};
pub use scene::{
    generate_capture, generate_scene, generate_scene_captures, render_solid_frontal,
    SceneConfig, SceneError, Solid,
};

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::mask::Mask;

/// One food category of the recognition task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoodClass {
    pub id: usize,
    pub name: String,
}

/// The default six-category catalog. Each class is bound to one solid
/// archetype with a characteristic color; the two flat variants reuse the
/// cylinder and cuboid primitives with disk/slab proportions so that all six
/// classes are reachable.
pub fn default_catalog() -> Vec<FoodClass> {
    ["potato", "meat", "carrot", "pasta", "vegetable", "rice"]
        .iter()
        .enumerate()
        .map(|(id, name)| FoodClass {
            id,
            name: (*name).to_string(),
        })
        .collect()
}

/// Capture regime of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseTag {
    /// Frontal view at 0.40 m.
    Fixed90,
    /// Tilted view at 0.60 m.
    Fixed60,
    /// Randomized distance and tilt.
    Random,
}

/// Plain 8-bit RGB image, row major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>, // 3 bytes per pixel
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize) -> Self {
        Rgb8Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn flip_lr(&self) -> Rgb8Image {
        let mut out = Rgb8Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn flip_ud(&self) -> Rgb8Image {
        let mut out = Rgb8Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(x, self.height - 1 - y));
            }
        }
        out
    }
}

/// Pixel bounding box with inclusive minima and exclusive maxima.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }
}

/// One annotated food item.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: Mask,
    pub volume_ml: f64,
}

/// One RGB-D capture of a meal scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub rgb: Rgb8Image,
    pub depth_gt: DepthMap,
    pub camera: CameraIntrinsics,
    pub plate_mask: Mask,
    pub plane_depth: f64,
    pub instances: Vec<InstanceAnnotation>,
    pub pose_tag: PoseTag,
}

impl Sample {
    /// Checks every structural invariant; used by the loader and after
    /// generation.
    pub fn validate(&self) -> Result<(), String> {
        let (w, h) = (self.rgb.width, self.rgb.height);
        if self.depth_gt.width() != w || self.depth_gt.height() != h {
            return Err(format!(
                "depth {}x{} does not match rgb {w}x{h}",
                self.depth_gt.width(),
                self.depth_gt.height()
            ));
        }
        if self.plate_mask.width() != w || self.plate_mask.height() != h {
            return Err("plate mask size mismatch".into());
        }
        if self.depth_gt.values().iter().any(|&d| !(0.0..=1.0).contains(&d)) {
            return Err("depth values outside [0, 1] m".into());
        }
        if !(0.0..=1.0).contains(&self.plane_depth) || self.plane_depth == 0.0 {
            return Err(format!("plane depth {} outside (0, 1]", self.plane_depth));
        }
        if !(2..=4).contains(&self.instances.len()) {
            return Err(format!("{} instances, expected 2-4", self.instances.len()));
        }
        let mut seen = Mask::zeros(w, h);
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.volume_ml <= 0.0 {
                return Err(format!("instance {i} volume {} <= 0", inst.volume_ml));
            }
            let bbox = inst
                .mask
                .bbox()
                .ok_or_else(|| format!("instance {i} mask is empty"))?;
            if (bbox.0, bbox.1, bbox.2, bbox.3)
                != (
                    inst.bbox.x_min,
                    inst.bbox.y_min,
                    inst.bbox.x_max,
                    inst.bbox.y_max,
                )
            {
                return Err(format!(
                    "instance {i} bbox {:?} does not bound its mask {bbox:?}",
                    inst.bbox
                ));
            }
            for y in 0..h {
                for x in 0..w {
                    if inst.mask.get(x, y) {
                        if seen.get(x, y) {
                            return Err(format!("instance {i} overlaps another mask"));
                        }
                        if !self.plate_mask.get(x, y) {
                            return Err(format!("instance {i} extends outside the plate"));
                        }
                        seen.set(x, y, true);
                    }
                }
            }
        }
        Ok(())
    }

    /// Geometrically consistent left-right flip of all per-pixel and
    /// per-box fields; the camera principal point mirrors with the image.
    pub fn flip_lr(&self) -> Sample {
        let w = self.rgb.width;
        let mut depth = self.depth_gt.clone();
        for y in 0..self.depth_gt.height() {
            for x in 0..w {
                depth.set(x, y, self.depth_gt.get(w - 1 - x, y));
            }
        }
        Sample {
            rgb: self.rgb.flip_lr(),
            depth_gt: depth,
            camera: CameraIntrinsics {
                cx: 1.0 - self.camera.cx,
                ..self.camera
            },
            plate_mask: self.plate_mask.flip_lr(),
            plane_depth: self.plane_depth,
            instances: self
                .instances
                .iter()
                .map(|inst| InstanceAnnotation {
                    class_id: inst.class_id,
                    bbox: BBox {
                        x_min: w - inst.bbox.x_max,
                        y_min: inst.bbox.y_min,
                        x_max: w - inst.bbox.x_min,
                        y_max: inst.bbox.y_max,
                    },
                    mask: inst.mask.flip_lr(),
                    volume_ml: inst.volume_ml,
                })
                .collect(),
            pose_tag: self.pose_tag,
        }
    }

    pub fn flip_ud(&self) -> Sample {
        let h = self.rgb.height;
        let mut depth = self.depth_gt.clone();
        for y in 0..h {
            for x in 0..self.rgb.width {
                depth.set(x, y, self.depth_gt.get(x, h - 1 - y));
            }
        }
        Sample {
            rgb: self.rgb.flip_ud(),
            depth_gt: depth,
            camera: CameraIntrinsics {
                cy: 1.0 - self.camera.cy,
                ..self.camera
            },
            plate_mask: self.plate_mask.flip_ud(),
            plane_depth: self.plane_depth,
            instances: self
                .instances
                .iter()
                .map(|inst| InstanceAnnotation {
                    class_id: inst.class_id,
                    bbox: BBox {
                        x_min: inst.bbox.x_min,
                        y_min: h - inst.bbox.y_max,
                        x_max: inst.bbox.x_max,
                        y_max: h - inst.bbox.y_min,
                    },
                    mask: inst.mask.flip_ud(),
                    volume_ml: inst.volume_ml,
                })
                .collect(),
            pose_tag: self.pose_tag,
        }
    }
}

/// Reference to one sample on disk, carrying what split construction needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub path: String,
    pub scene: u64,
    pub pose: PoseTag,
}

/// Split manifest stored at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<FoodClass>,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

/// Test-subset selectors mirroring the fixed/free/full evaluation regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSplit {
    /// Frontal captures only.
    Fixed,
    /// Random-pose captures only.
    Free,
    /// Every capture.
    Full,
}

impl std::str::FromStr for TestSplit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(TestSplit::Fixed),
            "free" => Ok(TestSplit::Free),
            "full" => Ok(TestSplit::Full),
            other => Err(format!("unknown split '{other}' (expected fixed|free|full)")),
        }
    }
}

impl DatasetManifest {
    pub fn select_test(&self, split: TestSplit) -> Vec<&SampleRef> {
        self.test
            .iter()
            .filter(|s| match split {
                TestSplit::Fixed => s.pose == PoseTag::Fixed90,
                TestSplit::Free => s.pose == PoseTag::Random,
                TestSplit::Full => true,
            })
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("split ratios sum to {0}, expected 1")]
    BadRatios(f64),
    #[error("not enough scenes ({0}) for three non-empty splits")]
    TooFewScenes(usize),
}

/// Partitions samples into train/val/test by scene identity, so every
/// capture of one scene lands in the same split.
pub fn make_splits(
    samples: &[SampleRef],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest, SplitError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadRatios(sum));
    }
    let mut scenes: Vec<u64> = samples.iter().map(|s| s.scene).collect();
    scenes.sort_unstable();
    scenes.dedup();
    if scenes.len() < 3 {
        return Err(SplitError::TooFewScenes(scenes.len()));
    }
    let mut rng = crate::rng::Rng::seed_from_u64(seed);
    rng.shuffle(&mut scenes);
    let n = scenes.len();
    let n_train = ((ratios.0 * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((ratios.1 * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let train_set: std::collections::HashSet<u64> = scenes[..n_train].iter().copied().collect();
    let val_set: std::collections::HashSet<u64> =
        scenes[n_train..n_train + n_val].iter().copied().collect();
    let mut manifest = DatasetManifest {
        classes: default_catalog(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for s in samples {
        if train_set.contains(&s.scene) {
            manifest.train.push(s.clone());
        } else if val_set.contains(&s.scene) {
            manifest.val.push(s.clone());
        } else {
            manifest.test.push(s.clone());
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(scenes: u64, captures: u64) -> Vec<SampleRef> {
        let mut out = Vec::new();
        for s in 0..scenes {
            for c in 0..captures {
                let pose = match c {
                    0 | 1 => PoseTag::Fixed90,
                    2 | 3 => PoseTag::Fixed60,
                    _ => PoseTag::Random,
                };
                out.push(SampleRef {
                    path: format!("scene{s:04}_cap{c}"),
                    scene: s,
                    pose,
                });
            }
        }
        out
    }

    #[test]
    fn eighty_scenes_split_60_10_10() {
        let m = make_splits(&refs(80, 6), (0.75, 0.125, 0.125), 7).unwrap();
        let scenes = |v: &[SampleRef]| {
            let mut s: Vec<u64> = v.iter().map(|r| r.scene).collect();
            s.sort_unstable();
            s.dedup();
            s.len()
        };
        assert_eq!(scenes(&m.train), 60);
        assert_eq!(scenes(&m.val), 10);
        assert_eq!(scenes(&m.test), 10);
        assert_eq!(m.train.len() + m.val.len() + m.test.len(), 480);
    }

    #[test]
    fn splits_are_scene_disjoint_for_many_seeds() {
        for seed in 0..20 {
            let m = make_splits(&refs(17, 6), (0.6, 0.2, 0.2), seed).unwrap();
            let collect = |v: &[SampleRef]| {
                v.iter().map(|r| r.scene).collect::<std::collections::HashSet<_>>()
            };
            let (t, v, e) = (collect(&m.train), collect(&m.val), collect(&m.test));
            assert!(t.is_disjoint(&v) && t.is_disjoint(&e) && v.is_disjoint(&e));
            assert!(!t.is_empty() && !v.is_empty() && !e.is_empty());
        }
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(matches!(
            make_splits(&refs(8, 6), (0.5, 0.2, 0.2), 0),
            Err(SplitError::BadRatios(_))
        ));
    }

    #[test]
    fn test_selectors_filter_by_pose() {
        let m = make_splits(&refs(10, 6), (0.6, 0.2, 0.2), 3).unwrap();
        let fixed = m.select_test(TestSplit::Fixed);
        let free = m.select_test(TestSplit::Free);
        let full = m.select_test(TestSplit::Full);
        assert!(fixed.iter().all(|s| s.pose == PoseTag::Fixed90));
        assert!(free.iter().all(|s| s.pose == PoseTag::Random));
        assert_eq!(full.len(), fixed.len() + free.len() + full
            .iter()
            .filter(|s| s.pose == PoseTag::Fixed60)
            .count());
        // full set carries every pose tag
        for tag in [PoseTag::Fixed90, PoseTag::Fixed60, PoseTag::Random] {
            assert!(full.iter().any(|s| s.pose == tag));
        }
    }
}
