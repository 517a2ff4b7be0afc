use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{indexed, mix, mix_label};
use crate::rng::rng_from_seed;
use crate::toyshape::raster::{rasterize, rasterize_gray, RasterImage};
use crate::toyshape::{sample_scene_in_bucket, CountProfile, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<RasterImage>,
    pub scenes: Vec<SceneSpec>,
}

/// Buckets with equal positive weight are assigned in shuffled blocks, so
/// every block of |B| consecutive images covers each bucket exactly once.
fn balanced_bucket(profile: &CountProfile, seed: u64, index: usize) -> Option<usize> {
    let support: Vec<usize> = (0..profile.bucket_weights.len()).filter(|&k| profile.bucket_weights[k] > 0.0).collect();
    let first = *support.first()?;
    if support.iter().any(|&k| profile.bucket_weights[k] != profile.bucket_weights[first]) {
        return None;
    }
    let block = index / support.len();
    let mut order = support.clone();
    order.shuffle(&mut indexed(mix_label(seed, "buckets"), block as u64));
    Some(order[index % support.len()])
}

/// Scene descriptions for images `0..n`; image i depends only on (seed, i).
pub fn generate_scenes(n: usize, profile: &CountProfile, seed: u64, size: usize) -> Result<Vec<SceneSpec>> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    profile.validate()?;
    let scene_seed = mix_label(seed, "scenes");
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed(scene_seed, i as u64);
            let bucket = balanced_bucket(profile, seed, i);
            sample_scene_in_bucket(profile, bucket, size, size, &mut rng)
        })
        .collect()
}

pub fn generate_dataset(n: usize, profile: &CountProfile, seed: u64, size: usize) -> Result<Dataset> {
    let scenes = generate_scenes(n, profile, seed, size)?;
    let images = scenes.par_iter().map(rasterize).collect();
    Ok(Dataset { images, scenes })
}

/// Per-image seed for derived randomness (e.g. gray-level draws).
pub(crate) fn image_seed(seed: u64, label: &str, index: usize) -> u64 {
    mix(mix_label(seed, label), index as u64)
}

/// Intensity variant: gray images with their binary occupancy masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayDataset {
    pub images: Vec<RasterImage>,
    pub masks: Vec<RasterImage>,
    pub scenes: Vec<SceneSpec>,
}

/// Same scenes as [`generate_dataset`] with the same seed, rendered with
/// per-image intensity draws.
pub fn generate_gray_dataset(n: usize, profile: &CountProfile, seed: u64, size: usize) -> Result<GrayDataset> {
    let scenes = generate_scenes(n, profile, seed, size)?;
    let (images, masks) = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| rasterize_gray(s, &mut rng_from_seed(image_seed(seed, "gray", i))))
        .unzip();
    Ok(GrayDataset { images, masks, scenes })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelStatistics {
    pub images: usize,
    /// Images by total object count 0..=9.
    pub by_total: Vec<usize>,
    /// Images containing at least one instance of each category.
    pub appearances: [usize; 3],
}

pub fn label_statistics(scenes: &[SceneSpec]) -> LabelStatistics {
    let mut by_total = vec![0; 10];
    let mut appearances = [0; 3];
    for s in scenes {
        let c = s.counts();
        by_total[(c.total() as usize).min(9)] += 1;
        for i in 0..3 {
            if c.0[i] > 0 {
                appearances[i] += 1;
            }
        }
    }
    LabelStatistics { images: scenes.len(), by_total, appearances }
}
