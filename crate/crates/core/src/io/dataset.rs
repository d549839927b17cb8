//! Dataset directories: `cameras.json`, 8-bit RGB images and 16-bit ID masks.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::image::{Image, MaskMap};
use crate::scene::Camera;
use crate::trainer::TrainView;
use crate::{Error, Result};

/// One entry of `cameras.json`. Paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4×4 world-to-camera transform.
    pub world_to_camera: [f64; 16],
}

impl CameraRecord {
    pub fn from_camera(cam: &Camera, image: String, mask: Option<String>) -> Self {
        let mut m = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                m[r * 4 + c] = cam.world_to_camera[(r, c)];
            }
        }
        CameraRecord {
            image,
            mask,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            world_to_camera: m,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        Camera::new(
            self.width,
            self.height,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Matrix4::from_row_slice(&self.world_to_camera),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub root: PathBuf,
    pub views: Vec<CameraRecord>,
    /// Largest mask id over all views (0 without masks).
    pub num_ids: u32,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: Vec<Option<MaskMap>>,
}

impl Dataset {
    pub fn train_views(&self) -> Vec<TrainView> {
        self.cameras
            .iter()
            .zip(&self.images)
            .zip(&self.masks)
            .map(|((c, i), m)| TrainView::new(c.clone(), i.clone(), m.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Ignore mask files entirely.
    pub no_masks: bool,
    /// Reject mask ids above this classifier capacity.
    pub max_id: Option<u32>,
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = ::image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    Ok(Image::from_rgb8(&img.to_rgb8()))
}

pub fn write_rgb(img: &Image, path: &Path) -> Result<()> {
    img.to_rgb8().save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn read_mask(path: &Path) -> Result<MaskMap> {
    let img = ::image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    MaskMap::from_ids(w as usize, h as usize, luma.into_raw().into_iter().map(u32::from).collect())
}

pub fn write_mask(mask: &MaskMap, path: &Path) -> Result<()> {
    let data: Vec<u16> = mask
        .ids
        .iter()
        .map(|&v| u16::try_from(v).map_err(|_| Error::malformed(path, format!("mask id {v} exceeds 16 bits"))))
        .collect::<Result<_>>()?;
    let buf = ::image::ImageBuffer::<::image::Luma<u16>, _>::from_raw(mask.width as u32, mask.height as u32, data)
        .ok_or_else(|| Error::Internal("mask buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn read_cameras(dir: &Path) -> Result<Vec<CameraRecord>> {
    let path = dir.join("cameras.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}

pub fn write_cameras(dir: &Path, records: &[CameraRecord]) -> Result<()> {
    let path = dir.join("cameras.json");
    let json = serde_json::to_string_pretty(records).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path, opts: LoadOptions) -> Result<Dataset> {
    let records = read_cameras(dir)?;
    let mut cameras = Vec::with_capacity(records.len());
    let mut images = Vec::with_capacity(records.len());
    let mut masks = Vec::with_capacity(records.len());
    let mut num_ids = 0;
    for rec in &records {
        let cam = rec.camera()?;
        let ipath = dir.join(&rec.image);
        let img = read_rgb(&ipath)?;
        if img.width != rec.width || img.height != rec.height {
            return Err(Error::malformed(&ipath, format!("image is {}x{}, camera says {}x{}", img.width, img.height, rec.width, rec.height)));
        }
        let mask = match (&rec.mask, opts.no_masks) {
            (Some(m), false) => {
                let mpath = dir.join(m);
                let mask = read_mask(&mpath)?;
                if mask.width != rec.width || mask.height != rec.height {
                    return Err(Error::malformed(&mpath, "mask size differs from its image"));
                }
                let id = mask.max_id();
                if let Some(cap) = opts.max_id {
                    if id > cap {
                        return Err(Error::MaskIdOutOfRange { id, channels: cap as usize });
                    }
                }
                num_ids = num_ids.max(id);
                Some(mask)
            }
            _ => None,
        };
        cameras.push(cam);
        images.push(img);
        masks.push(mask);
    }
    Ok(Dataset { meta: DatasetMeta { root: dir.to_path_buf(), views: records, num_ids }, cameras, images, masks })
}

/// Writes a dataset directory with `images/NNN.png` and, when present, `masks/NNN.png`.
pub fn save_dataset(dir: &Path, cameras: &[Camera], images: &[Image], masks: &[Option<MaskMap>]) -> Result<Vec<CameraRecord>> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    if masks.iter().any(|m| m.is_some()) {
        fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let name = format!("{i:03}.png");
        let image = format!("images/{name}");
        write_rgb(&images[i], &dir.join(&image))?;
        let mask = match masks.get(i).and_then(|m| m.as_ref()) {
            Some(m) => {
                let rel = format!("masks/{name}");
                write_mask(m, &dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        records.push(CameraRecord::from_camera(cam, image, mask));
    }
    write_cameras(dir, &records)?;
    Ok(records)
}

/// Reads every `*.png` mask of a directory in file-name order.
pub fn read_mask_dir(dir: &Path) -> Result<Vec<(String, MaskMap)>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    names.into_iter().map(|n| read_mask(&dir.join(&n)).map(|m| (n, m))).collect()
}
