//! Differentiable Gaussian splatting with per-Gaussian identity encodings.
//!
//! Every Gaussian carries a 16-dimensional identity vector that is alpha-blended
//! exactly like color. A shared linear classifier maps rendered identity features
//! to instance logits, which lets a trained scene be split into groups and edited
//! group by group (removal, recomposition, recoloring, restricted fine-tuning).

pub mod cli;
pub mod editor;
pub mod gradcheck;
mod error;
pub mod image;
pub mod io;
pub mod knn;
pub mod losses;
pub mod projection;
pub mod rasterizer;
pub mod scene;
pub mod sh;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Image, MaskMap};
pub use scene::{Camera, Classifier, Gaussian, Scene, IDENTITY_DIM};
