//! Conversion between full-resolution rasters and the network's sample space,
//! and evaluation of sample batches with the counter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counting::{CountVerdict, Counter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toyshape::{downscale, upscale_bilinear, CountProfile, RasterImage};

/// Images of side `image_size` are average-pooled by `factor` for the
/// network; samples are bilinearly upsampled back before counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub image_size: usize,
    pub factor: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Self { image_size: 64, factor: 2 }
    }
}

impl Resolution {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.image_size == 0 || self.image_size % self.factor != 0 {
            return Err(Error::InvalidConfig(format!("image size {} not divisible by {}", self.image_size, self.factor)));
        }
        Ok(())
    }

    pub fn model_side(&self) -> usize {
        self.image_size / self.factor
    }

    /// Values per channel in sample space.
    pub fn model_pixels(&self) -> usize {
        self.model_side() * self.model_side()
    }

    /// Full-resolution image → model-space values in [−1, 1].
    pub fn encode(&self, image: &RasterImage) -> Result<Vec<f64>> {
        if image.height != self.image_size || image.width != self.image_size {
            return Err(Error::ShapeMismatch { expected: vec![self.image_size; 2], got: vec![image.height, image.width] });
        }
        Ok(downscale(image, self.factor)?.to_model_values())
    }

    /// One channel of model-space values → full-resolution image in [0, 1].
    pub fn decode(&self, values: &[f64]) -> Result<RasterImage> {
        let side = self.model_side();
        upscale_bilinear(&RasterImage::from_model_values(side, side, values)?, self.factor)
    }

    pub fn encode_all(&self, images: &[RasterImage]) -> Result<Vec<Tensor>> {
        images.par_iter().map(|img| Ok(Tensor::from_vec(self.encode(img)?))).collect()
    }

    /// Decodes channel 0 of every sample row (rows hold `channels` planes).
    pub fn decode_samples(&self, samples: &Tensor, channels: usize) -> Result<Vec<RasterImage>> {
        let plane = self.model_pixels();
        if samples.row_len() != plane * channels {
            return Err(Error::DimensionMismatch { expected: plane * channels, got: samples.row_len() });
        }
        (0..samples.rows()).into_par_iter().map(|i| self.decode(&samples.row(i)[..plane])).collect()
    }
}

/// Judges channel 0 of every sample; the other channels are never read.
pub fn evaluate_samples(
    samples: &Tensor,
    channels: usize,
    resolution: &Resolution,
    counter: &Counter,
    profile: &CountProfile,
) -> Result<Vec<CountVerdict>> {
    let images = resolution.decode_samples(samples, channels)?;
    images.par_iter().map(|img| counter.judge(img, profile, None)).collect()
}
