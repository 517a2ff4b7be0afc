use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::toyshape::geometry::{inside_convex, Point};
use crate::toyshape::SceneSpec;

/// Row-major grayscale image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl RasterImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::ShapeMismatch { expected: vec![height, width], got: vec![pixels.len()] });
        }
        Ok(Self { height, width, pixels })
    }

    /// Model-space values v ∈ [−1, 1] mapped back to [0, 1] and clamped.
    pub fn from_model_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0) as f32).collect();
        Self::new(height, width, pixels)
    }

    /// Pixels mapped to [−1, 1] for the diffusion model.
    pub fn to_model_values(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| 2.0 * p as f64 - 1.0).collect()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn foreground(&self) -> usize {
        self.pixels.iter().filter(|&&p| p >= 0.5).count()
    }

    pub fn clamped(mut self) -> Self {
        for p in &mut self.pixels {
            *p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
        }
        self
    }

    /// Rotates by 90° clockwise.
    pub fn rot90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                out[j * h + (h - 1 - i)] = self.pixels[i * w + j];
            }
        }
        Self { height: w, width: h, pixels: out }
    }
}

fn fill(scene: &SceneSpec, mut paint: impl FnMut(usize, usize, usize)) {
    for (idx, shape) in scene.shapes.iter().enumerate() {
        let v = shape.vertices();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &v {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let rows = (y0.floor().max(0.0) as usize)..=(y1.ceil().min(scene.height as f64 - 1.0) as usize);
        let cols = (x0.floor().max(0.0) as usize)..=(x1.ceil().min(scene.width as f64 - 1.0) as usize);
        for i in rows {
            for j in cols.clone() {
                if inside_convex(&v, Point { x: j as f64 + 0.5, y: i as f64 + 0.5 }) {
                    paint(idx, i, j);
                }
            }
        }
    }
}

/// Binary raster: a pixel is foreground when its centre lies in a shape.
pub fn rasterize(scene: &SceneSpec) -> RasterImage {
    let mut img = RasterImage::zeros(scene.height, scene.width);
    let w = scene.width;
    fill(scene, |_, i, j| img.pixels[i * w + j] = 1.0);
    img
}

/// Intensity variant: each shape gets a uniform intensity in [0.4, 1.0] over
/// a N(0.15, 0.03²) background, clamped to [0, 1]. Returns (image, occupancy mask).
pub fn rasterize_gray(scene: &SceneSpec, rng: &mut Rng) -> (RasterImage, RasterImage) {
    let levels: Vec<f32> = scene.shapes.iter().map(|_| rng.gen_range(0.4..=1.0)).collect();
    let bg = Normal::new(0.15, 0.03).expect("valid normal");
    let mut img = RasterImage::zeros(scene.height, scene.width);
    for p in &mut img.pixels {
        *p = (bg.sample(rng) as f32).clamp(0.0, 1.0);
    }
    let mask = rasterize(scene);
    let w = scene.width;
    fill(scene, |idx, i, j| img.pixels[i * w + j] = levels[idx]);
    (img, mask)
}

/// Average pooling by an integer factor.
pub fn downscale(img: &RasterImage, factor: usize) -> Result<RasterImage> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(Error::InvalidConfig(format!("cannot downscale {}x{} by {factor}", img.height, img.width)));
    }
    let (h, w) = (img.height / factor, img.width / factor);
    let norm = (factor * factor) as f32;
    let mut out = vec![0.0f32; h * w];
    for i in 0..img.height {
        for j in 0..img.width {
            out[(i / factor) * w + j / factor] += img.pixels[i * img.width + j];
        }
    }
    for v in &mut out {
        *v /= norm;
    }
    RasterImage::new(h, w, out)
}

/// Bilinear upsampling by an integer factor (pixel-centre aligned, edges clamped).
pub fn upscale_bilinear(img: &RasterImage, factor: usize) -> Result<RasterImage> {
    if factor == 0 {
        return Err(Error::InvalidConfig("upscale factor must be positive".into()));
    }
    let (h, w) = (img.height * factor, img.width * factor);
    let f = factor as f64;
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let (r0, r1, fy) = coord(i, img.height);
        for j in 0..w {
            let (c0, c1, fx) = coord(j, img.width);
            let top = img.get(r0, c0) as f64 * (1.0 - fx) + img.get(r0, c1) as f64 * fx;
            let bot = img.get(r1, c0) as f64 * (1.0 - fx) + img.get(r1, c1) as f64 * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    RasterImage::new(h, w, out)
}
