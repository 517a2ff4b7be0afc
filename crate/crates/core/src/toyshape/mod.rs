//! Procedural ToyShape scenes: white regular polygons of equal area on a
//! black background, with exact per-category labels.

mod dataset;
mod geometry;
mod io;
mod raster;

pub use dataset::{generate_dataset, generate_gray_dataset, generate_scenes, label_statistics, Dataset, GrayDataset, LabelStatistics};
pub use geometry::{polygon_distance, Point};
pub use io::{read_image, read_manifest, read_pgm, write_dataset, write_manifest, write_pgm, write_png, ManifestRow};
pub use raster::{downscale, rasterize, rasterize_gray, upscale_bilinear, RasterImage};

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Area of every shape, in pixels.
pub const SHAPE_AREA: f64 = 120.0;
/// Minimum gap between shapes and from the image border, in pixels.
pub const CLEARANCE: f64 = 2.0;
pub const MAX_REJECTIONS: usize = 10_000;
pub const IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Triangle,
    Square,
    Pentagon,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Triangle, Category::Square, Category::Pentagon];

    pub fn sides(self) -> usize {
        self as usize + 3
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Circumradius of the regular polygon with area [`SHAPE_AREA`].
    pub fn circumradius(self) -> f64 {
        let n = self.sides() as f64;
        (2.0 * SHAPE_AREA / (n * (std::f64::consts::TAU / n).sin())).sqrt()
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Triangle => "triangle",
            Category::Square => "square",
            Category::Pentagon => "pentagon",
        })
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown category {s:?}")))
    }
}

/// Object count per category, indexed by [`Category::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CountVector(pub [u32; 3]);

impl CountVector {
    pub fn get(&self, c: Category) -> u32 {
        self.0[c.index()]
    }

    pub fn add(&mut self, c: Category) {
        self.0[c.index()] += 1;
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }
}

impl fmt::Display for CountVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{triangle:{}, square:{}, pentagon:{}}}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub category: Category,
    /// (x, y) in pixel coordinates; pixel (row i, col j) covers [j, j+1)×[i, i+1).
    pub center: (f64, f64),
    pub rotation: f64,
    pub area: f64,
}

impl ShapeSpec {
    pub fn new(category: Category, center: (f64, f64), rotation: f64) -> Self {
        Self { category, center, rotation, area: SHAPE_AREA }
    }

    pub fn circumradius(&self) -> f64 {
        let n = self.category.sides() as f64;
        (2.0 * self.area / (n * (std::f64::consts::TAU / n).sin())).sqrt()
    }

    /// Vertices in counter-clockwise order. Rotation 0 puts an edge midpoint
    /// straight below the centre, so a square at rotation 0 is axis-aligned.
    pub fn vertices(&self) -> Vec<Point> {
        let n = self.category.sides();
        let r = self.circumradius();
        let step = std::f64::consts::TAU / n as f64;
        let base = self.rotation - std::f64::consts::FRAC_PI_2 - step / 2.0;
        (0..n)
            .map(|k| {
                let a = base + step * k as f64;
                Point { x: self.center.0 + r * a.cos(), y: self.center.1 + r * a.sin() }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    pub height: usize,
    pub width: usize,
}

impl SceneSpec {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { shapes: Vec::new(), height, width }
    }

    pub fn counts(&self) -> CountVector {
        let mut c = CountVector::default();
        for s in &self.shapes {
            c.add(s.category);
        }
        c
    }
}

/// Admissible counts S_c per category and how scenes are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountProfile {
    pub name: String,
    /// S_c, indexed by [`Category::index`].
    pub allowed: [Vec<u32>; 3],
    pub require_nonempty: bool,
    /// Relative frequency of each total object count (index = total). Empty
    /// means every category count is drawn independently and uniformly from S_c.
    pub bucket_weights: Vec<f64>,
}

impl CountProfile {
    /// At most one instance per category, at least one object, totals 1/2/3
    /// in equal proportion.
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            allowed: [vec![0, 1], vec![0, 1], vec![0, 1]],
            require_nonempty: true,
            bucket_weights: vec![0.0, 1.0, 1.0, 1.0],
        }
    }

    /// Each category 0–3 times, independently; empty scenes allowed.
    pub fn calibration() -> Self {
        Self {
            name: "calibration".into(),
            allowed: [vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![0, 1, 2, 3]],
            require_nonempty: false,
            bucket_weights: Vec::new(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "calibration" => Ok(Self::calibration()),
            other => Err(Error::InvalidConfig(format!("unknown profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.allowed {
            if s.is_empty() || s.iter().any(|&v| v > 3) {
                return Err(Error::InvalidConfig("S_c must be a nonempty subset of 0..=3".into()));
            }
        }
        if self.bucket_weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig("bucket weights must be nonnegative".into()));
        }
        if !self.bucket_weights.is_empty() && self.bucket_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig("bucket weights sum to zero".into()));
        }
        Ok(())
    }

    pub fn admits(&self, counts: &CountVector) -> bool {
        (0..3).all(|i| self.allowed[i].contains(&counts.0[i])) && (!self.require_nonempty || counts.total() > 0)
    }

    /// Totals that can be reached with one instance per category (the
    /// bucketed draw picks which categories appear).
    fn bucketed(&self) -> bool {
        !self.bucket_weights.is_empty()
    }

    fn draw_bucket(&self, rng: &mut Rng) -> usize {
        let total: f64 = self.bucket_weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (k, &w) in self.bucket_weights.iter().enumerate() {
            if u < w {
                return k;
            }
            u -= w;
        }
        self.bucket_weights.len() - 1
    }

    /// Draws a count vector; `bucket` forces the total for bucketed profiles.
    pub fn draw_counts(&self, bucket: Option<usize>, rng: &mut Rng) -> Result<CountVector> {
        if self.bucketed() {
            let k = bucket.unwrap_or_else(|| self.draw_bucket(rng));
            if k > 3 {
                return Err(Error::InvalidConfig(format!("object-count bucket {k} exceeds 3")));
            }
            let mut c = CountVector::default();
            for i in sample_indices(rng, 3, k).into_iter() {
                c.0[i] = 1;
            }
            if !self.admits(&c) {
                return Err(Error::InvalidConfig(format!("bucket {k} is not admissible under S_c")));
            }
            return Ok(c);
        }
        loop {
            let mut c = CountVector::default();
            for i in 0..3 {
                let s = &self.allowed[i];
                c.0[i] = s[rng.gen_range(0..s.len())];
            }
            if self.admits(&c) {
                return Ok(c);
            }
        }
    }
}

fn centre_snapped(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    // pixel centres only, so axis-aligned edges fall between pixel rows
    let a = (lo - 0.5).ceil() as i64;
    let b = (hi - 0.5).floor() as i64;
    if b < a {
        return f64::NAN;
    }
    rng.gen_range(a..=b) as f64 + 0.5
}

/// Places shapes with the given counts by rejection sampling.
pub fn place_shapes(counts: &CountVector, height: usize, width: usize, rng: &mut Rng) -> Result<SceneSpec> {
    let mut cats: Vec<Category> = Category::ALL
        .iter()
        .flat_map(|&c| std::iter::repeat(c).take(counts.get(c) as usize))
        .collect();
    // largest first: harder placements while the canvas is emptiest
    cats.sort_by(|a, b| b.circumradius().total_cmp(&a.circumradius()));
    let mut rejections = 0;
    'restart: loop {
        let mut placed: Vec<(ShapeSpec, Vec<Point>)> = Vec::with_capacity(cats.len());
        for &cat in &cats {
            loop {
                let rot = rng.gen::<f64>() * std::f64::consts::TAU;
                let r = cat.circumradius();
                let cx = centre_snapped(rng, CLEARANCE, width as f64 - CLEARANCE);
                let cy = centre_snapped(rng, CLEARANCE, height as f64 - CLEARANCE);
                let shape = ShapeSpec::new(cat, (cx, cy), rot);
                let verts = shape.vertices();
                let inside = cx.is_finite()
                    && cy.is_finite()
                    && verts.iter().all(|p| {
                        p.x >= CLEARANCE
                            && p.x <= width as f64 - CLEARANCE
                            && p.y >= CLEARANCE
                            && p.y <= height as f64 - CLEARANCE
                    });
                let clear = inside
                    && placed.iter().all(|(o, ov)| {
                        let d = ((o.center.0 - cx).powi(2) + (o.center.1 - cy).powi(2)).sqrt();
                        d > o.circumradius() + r + CLEARANCE || polygon_distance(ov, &verts) >= CLEARANCE
                    });
                if clear {
                    placed.push((shape, verts));
                    break;
                }
                rejections += 1;
                if rejections >= MAX_REJECTIONS {
                    return Err(Error::PlacementExhausted { attempts: rejections });
                }
                // a crowded partial layout may be unfinishable; start over now and then
                if rejections % 500 == 0 {
                    continue 'restart;
                }
            }
        }
        return Ok(SceneSpec { shapes: placed.into_iter().map(|p| p.0).collect(), height, width });
    }
}

/// Draws a scene satisfying `profile`.
pub fn sample_scene(profile: &CountProfile, height: usize, width: usize, rng: &mut Rng) -> Result<SceneSpec> {
    sample_scene_in_bucket(profile, None, height, width, rng)
}

pub fn sample_scene_in_bucket(
    profile: &CountProfile,
    bucket: Option<usize>,
    height: usize,
    width: usize,
    rng: &mut Rng,
) -> Result<SceneSpec> {
    profile.validate()?;
    let counts = profile.draw_counts(bucket, rng)?;
    place_shapes(&counts, height, width, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn shoelace(p: &[Point]) -> f64 {
        let n = p.len();
        0.5 * (0..n).map(|i| p[i].x * p[(i + 1) % n].y - p[(i + 1) % n].x * p[i].y).sum::<f64>()
    }

    #[test]
    fn polygons_have_the_shape_area() {
        for c in Category::ALL {
            let s = ShapeSpec::new(c, (30.5, 20.5), 0.7);
            let v = s.vertices();
            assert_eq!(v.len(), c.sides());
            assert!((shoelace(&v) - SHAPE_AREA).abs() < 1e-9, "{c}");
        }
    }

    #[test]
    fn unrotated_square_is_axis_aligned() {
        let v = ShapeSpec::new(Category::Square, (0.0, 0.0), 0.0).vertices();
        let h = SHAPE_AREA.sqrt() / 2.0;
        for p in v {
            assert!((p.x.abs() - h).abs() < 1e-12 && (p.y.abs() - h).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_profile_scenes_obey_constraints() {
        let p = CountProfile::paper();
        let mut rng = rng_from_seed(3);
        for _ in 0..300 {
            let s = sample_scene(&p, 64, 64, &mut rng).unwrap();
            let c = s.counts();
            assert!(c.0.iter().all(|&v| v <= 1) && c.total() >= 1);
        }
    }

    #[test]
    fn calibration_profile_can_fill_the_canvas() {
        let full = CountVector([3, 3, 3]);
        let mut rng = rng_from_seed(4);
        for _ in 0..20 {
            let s = place_shapes(&full, 64, 64, &mut rng).unwrap();
            assert_eq!(s.counts(), full);
            for (i, a) in s.shapes.iter().enumerate() {
                for b in &s.shapes[i + 1..] {
                    assert!(polygon_distance(&a.vertices(), &b.vertices()) >= CLEARANCE);
                }
            }
        }
    }

    #[test]
    fn tiny_canvas_exhausts_placement() {
        let mut rng = rng_from_seed(0);
        let r = place_shapes(&CountVector([1, 0, 0]), 12, 12, &mut rng);
        assert!(matches!(r, Err(Error::PlacementExhausted { .. })));
    }

    #[test]
    fn profile_admission() {
        let p = CountProfile::paper();
        assert!(p.admits(&CountVector([1, 0, 1])));
        assert!(!p.admits(&CountVector([0, 0, 2])));
        assert!(!p.admits(&CountVector([0, 0, 0])));
        assert!(CountProfile::calibration().admits(&CountVector([0, 0, 0])));
        let bad = CountProfile { allowed: [vec![], vec![0], vec![0]], ..CountProfile::paper() };
        assert!(bad.validate().is_err());
        assert_eq!("pentagon".parse::<Category>().unwrap(), Category::Pentagon);
    }
}
