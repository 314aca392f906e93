//! In-memory training samples.

use candle_core::{DType, Device, Tensor};
use image::Rgb32FImage;

use crate::error::Result;
use crate::geometry::{CenterBox, Polygon16};

/// One text instance in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TextInstance {
    pub polygon: Polygon16,
    /// Axis-aligned hull of `polygon`.
    pub bbox: CenterBox,
    pub transcript: String,
}

impl TextInstance {
    pub fn new(polygon: Polygon16, transcript: impl Into<String>) -> Self {
        Self {
            bbox: polygon.bounding_box(),
            polygon,
            transcript: transcript.into(),
        }
    }
}

/// An RGB image with values in `[0, 1]` and its text instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SpottingSample {
    pub image: Rgb32FImage,
    pub instances: Vec<TextInstance>,
}

impl SpottingSample {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// `(H, W, 3)` tensor.
    pub fn image_tensor(&self, dtype: DType) -> Result<Tensor> {
        image_tensor(&self.image, dtype)
    }
}

pub fn image_tensor(image: &Rgb32FImage, dtype: DType) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let t = Tensor::from_vec(image.as_raw().clone(), (h as usize, w as usize, 3), &Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}
