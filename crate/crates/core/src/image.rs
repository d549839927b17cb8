//! Dense row-major multi-channel float images.

use crate::{Error, Result};

/// `height × width × channels` floats, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let channels = value.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Image { width, height, channels, data }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = self.offset(x, y);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Copies one channel out as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self.data.chunks_exact(self.channels).map(|p| p[c]).collect();
        Image { width: self.width, height: self.height, channels: 1, data }
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        assert_eq!(self.channels, 3, "to_rgb8 needs a 3-channel image");
        let bytes = self.data.iter().map(|&v| quantize(v)).collect();
        ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions")
    }

    pub fn from_rgb8(img: &::image::RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Image { width: img.width() as usize, height: img.height() as usize, channels: 3, data }
    }
}

/// Maps [0,1] to 0..=255 with rounding; out-of-range values are clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel instance ids: 0 = unlabeled/ignore, 1..=K = instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u32>,
}

impl MaskMap {
    pub fn new(width: usize, height: usize) -> Self {
        MaskMap { width, height, ids: vec![0; width * height] }
    }

    pub fn from_ids(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} ids for a {width}x{height} mask", ids.len())));
        }
        Ok(MaskMap { width, height, ids })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn max_id(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of the pixels carrying `id`.
    pub fn binary(&self, id: u32) -> Vec<bool> {
        self.ids.iter().map(|&v| v == id).collect()
    }

    pub fn area(&self, id: u32) -> usize {
        self.ids.iter().filter(|&&v| v == id).count()
    }
}
