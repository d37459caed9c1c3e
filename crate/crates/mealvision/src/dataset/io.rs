//! On-disk dataset format.
//!
//! One directory per sample: `rgb.png` (8-bit color), `depth.png` (16-bit
//! grayscale, millimeters), `annotation.json` (camera, plane depth, pose
//! tag, plate mask and per-instance class/bbox/RLE-mask/volume). A
//! `manifest.json` at the dataset root lists splits and pose tags. The same
//! schema is accepted for externally supplied RGB-D data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BBox, DatasetManifest, InstanceAnnotation, PoseTag, Rgb8Image, Sample};
use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::mask::Rle;

#[derive(Debug, Error)]
pub enum DataError {
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
    #[error("malformed annotation at {path}: {source}")]
    Annotation {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("mask decoding failed: {0}")]
    MaskDecode(#[from] crate::mask::MaskError),
    #[error("sample at {path} violates invariants: {reason}")]
    Validation { path: String, reason: String },
    #[error("depth/RGB size mismatch at {path}: rgb {rgb_w}x{rgb_h}, depth {depth_w}x{depth_h}")]
    SizeMismatch {
        path: String,
        rgb_w: usize,
        rgb_h: usize,
        depth_w: usize,
        depth_h: usize,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceDoc {
    class_id: usize,
    bbox: [usize; 4],
    mask: Rle,
    volume_ml: f64,
}

#[derive(Serialize, Deserialize)]
struct AnnotationDoc {
    camera: CameraIntrinsics,
    plane_depth_m: f64,
    pose_tag: PoseTag,
    plate_mask: Rle,
    instances: Vec<InstanceDoc>,
}

/// Writes `rgb.png`, `depth.png` and `annotation.json` into `dir`.
pub fn save_sample(sample: &Sample, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (w, h) = (sample.rgb.width, sample.rgb.height);

    let rgb_path = dir.join("rgb.png");
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, sample.rgb.data.clone())
        .expect("rgb buffer size");
    rgb.save(&rgb_path).map_err(|e| DataError::Image {
        path: rgb_path.display().to_string(),
        source: e,
    })?;

    let depth_path = dir.join("depth.png");
    let mut depth16 = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mm = (sample.depth_gt.get(x, y) * 1000.0).round();
            depth16.put_pixel(x as u32, y as u32, image::Luma([mm as u16]));
        }
    }
    depth16.save(&depth_path).map_err(|e| DataError::Image {
        path: depth_path.display().to_string(),
        source: e,
    })?;

    let doc = AnnotationDoc {
        camera: sample.camera,
        plane_depth_m: sample.plane_depth,
        pose_tag: sample.pose_tag,
        plate_mask: sample.plate_mask.to_rle(),
        instances: sample
            .instances
            .iter()
            .map(|inst| InstanceDoc {
                class_id: inst.class_id,
                bbox: [
                    inst.bbox.x_min,
                    inst.bbox.y_min,
                    inst.bbox.x_max,
                    inst.bbox.y_max,
                ],
                mask: inst.mask.to_rle(),
                volume_ml: inst.volume_ml,
            })
            .collect(),
    };
    let ann_path = dir.join("annotation.json");
    let json = serde_json::to_string(&doc).expect("annotation serializes");
    std::fs::write(&ann_path, json).map_err(|e| io_err(&ann_path, e))?;
    Ok(())
}

/// Loads a sample directory and validates every `Sample` invariant.
pub fn load_sample(dir: &Path) -> Result<Sample, DataError> {
    let rgb_path = dir.join("rgb.png");
    let rgb_img = image::open(&rgb_path)
        .map_err(|e| DataError::Image {
            path: rgb_path.display().to_string(),
            source: e,
        })?
        .into_rgb8();
    let rgb = Rgb8Image {
        width: rgb_img.width() as usize,
        height: rgb_img.height() as usize,
        data: rgb_img.into_raw(),
    };

    let depth_path = dir.join("depth.png");
    let depth_img = image::open(&depth_path)
        .map_err(|e| DataError::Image {
            path: depth_path.display().to_string(),
            source: e,
        })?
        .into_luma16();
    if (depth_img.width() as usize, depth_img.height() as usize) != (rgb.width, rgb.height) {
        return Err(DataError::SizeMismatch {
            path: dir.display().to_string(),
            rgb_w: rgb.width,
            rgb_h: rgb.height,
            depth_w: depth_img.width() as usize,
            depth_h: depth_img.height() as usize,
        });
    }
    let values: Vec<f64> = depth_img.pixels().map(|p| p.0[0] as f64 / 1000.0).collect();
    let depth_gt = DepthMap::new(rgb.width, rgb.height, values).map_err(|e| {
        DataError::Validation {
            path: dir.display().to_string(),
            reason: e.to_string(),
        }
    })?;

    let ann_path = dir.join("annotation.json");
    let text = std::fs::read_to_string(&ann_path).map_err(|e| io_err(&ann_path, e))?;
    let doc: AnnotationDoc =
        serde_json::from_str(&text).map_err(|e| DataError::Annotation {
            path: ann_path.display().to_string(),
            source: e,
        })?;

    let plate_mask = doc.plate_mask.decode()?;
    let mut instances = Vec::with_capacity(doc.instances.len());
    for inst in doc.instances {
        instances.push(InstanceAnnotation {
            class_id: inst.class_id,
            bbox: BBox {
                x_min: inst.bbox[0],
                y_min: inst.bbox[1],
                x_max: inst.bbox[2],
                y_max: inst.bbox[3],
            },
            mask: inst.mask.decode()?,
            volume_ml: inst.volume_ml,
        });
    }
    let sample = Sample {
        rgb,
        depth_gt,
        camera: doc.camera,
        plate_mask,
        plane_depth: doc.plane_depth_m,
        instances,
        pose_tag: doc.pose_tag,
    };
    sample.validate().map_err(|reason| DataError::Validation {
        path: dir.display().to_string(),
        reason,
    })?;
    Ok(sample)
}

pub fn save_manifest(manifest: &DatasetManifest, root: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| io_err(&path, e))
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest, DataError> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Annotation {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, SceneConfig};

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "mealvision-io-{tag}-{}",
            std::process::id()
        ));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn save_load_roundtrip_is_lossless() {
        let cfg = SceneConfig {
            resolution: 96,
            ..SceneConfig::default()
        };
        let sample = generate_scene(3, PoseTag::Fixed90, &cfg).unwrap();
        let dir = temp_dir("roundtrip");
        save_sample(&sample, &dir).unwrap();
        let back = load_sample(&dir).unwrap();
        assert_eq!(sample, back);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn millimeter_depth_is_exact() {
        let cfg = SceneConfig {
            resolution: 96,
            ..SceneConfig::default()
        };
        let sample = generate_scene(4, PoseTag::Fixed90, &cfg).unwrap();
        let dir = temp_dir("mm");
        save_sample(&sample, &dir).unwrap();
        let back = load_sample(&dir).unwrap();
        // 0.400 m stores as 400 and reloads as exactly 0.400
        assert!(back
            .depth_gt
            .values()
            .iter()
            .any(|&d| (d - 0.4).abs() < 1e-12));
        for (a, b) in sample.depth_gt.values().iter().zip(back.depth_gt.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loose_bbox_is_rejected() {
        let cfg = SceneConfig {
            resolution: 96,
            ..SceneConfig::default()
        };
        let mut sample = generate_scene(5, PoseTag::Fixed90, &cfg).unwrap();
        sample.instances[0].bbox.x_min = sample.instances[0].bbox.x_min.saturating_sub(2);
        let dir = temp_dir("badbbox");
        save_sample(&sample, &dir).unwrap();
        assert!(matches!(
            load_sample(&dir),
            Err(DataError::Validation { .. })
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_annotation_is_a_distinct_error() {
        let cfg = SceneConfig {
            resolution: 96,
            ..SceneConfig::default()
        };
        let sample = generate_scene(6, PoseTag::Fixed90, &cfg).unwrap();
        let dir = temp_dir("badjson");
        save_sample(&sample, &dir).unwrap();
        std::fs::write(dir.join("annotation.json"), "{not json").unwrap();
        assert!(matches!(
            load_sample(&dir),
            Err(DataError::Annotation { .. })
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn manifest_roundtrip() {
        let refs: Vec<crate::dataset::SampleRef> = (0..18)
            .map(|i| crate::dataset::SampleRef {
                path: format!("s{i}"),
                scene: i / 6,
                pose: PoseTag::Random,
            })
            .collect();
        let manifest = crate::dataset::make_splits(&refs, (0.6, 0.2, 0.2), 1).unwrap();
        let dir = temp_dir("manifest");
        save_manifest(&manifest, &dir).unwrap();
        assert_eq!(load_manifest(&dir).unwrap(), manifest);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
