//! Persistence, dataset ingestion, mask association, metrics and synthetic data.

pub mod associate;
pub mod dataset;
pub mod metrics;
pub mod ply;
pub mod synth;
pub mod visualize;

pub use associate::{associate_masks_greedy, AssociateConfig};
pub use dataset::{load_dataset, save_dataset, CameraRecord, Dataset, DatasetMeta, LoadOptions};
pub use metrics::{mbiou, miou, psnr, ssim};
pub use ply::{load_points, load_scene, save_points, save_scene};
pub use synth::{synth_scene, SynthSpec};
pub use visualize::feature_pca;
