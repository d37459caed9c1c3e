//! Desk-scale meal assessment from a single RGB image: joint food instance
//! segmentation, recognition, monocular depth prediction and per-item volume
//! regression, together with a synthetic RGB-D scene generator that supplies
//! verifiable ground truth and a full evaluation-metric suite.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`geometry`]: pinhole back-projection and depth-column volume integration
//! - [`dataset`]: synthetic scene generation, on-disk format, split manifests
//! - [`nn`]: the small autodiff engine the model is built on
//! - [`model`]: the multi-task network (backbone, depth branch, point-cloud
//!   conversion, region proposals, recognition/mask/volume heads)
//! - [`losses`]: the joint training objective and its constituents
//! - [`trainer`]: SGD loop, augmentation, checkpointing
//! - [`metrics`]: segmentation indices, AP family, depth and volume errors
//! - [`runner`]: batch entry points used by the CLI and the examples
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod config;
pub mod dataset;
pub mod geometry;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod trainer;
pub mod viz;

pub use geometry::{back_project, integrate_volume, CameraIntrinsics, DepthMap, PointCloud};
pub use mask::Mask;
