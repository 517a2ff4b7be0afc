//! Noise-prediction models ε_θ(x_t, t).

mod checkpoint;
mod gmm;
mod tinynet;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gmm::{Gmm, GmmScore};
pub use tinynet::{
    sinusoidal_embedding, Activation, Architecture, Skip, TinyNet, TrainConfig, TrainReport,
    DEFAULT_TIME_DIM,
};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that maps a noisy sample and a (continuous) time to a noise
/// prediction of the same shape.
pub trait ScoreModel: Send + Sync {
    /// Flattened dimension of one sample.
    fn dim(&self) -> usize;

    /// Predicts noise for every row of `x`, viewed as `len / dim` samples.
    fn predict_noise_batch(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor>;

    /// Predicts noise for a single sample of any shape with `dim` elements.
    fn predict_noise(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let shape = x.shape().to_vec();
        let out = self.predict_noise_batch(&x.clone().reshape(vec![1, self.dim()])?, t, schedule)?;
        out.reshape(shape)
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_noise_batch(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        (**self).predict_noise_batch(x, t, schedule)
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_noise_batch(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        (**self).predict_noise_batch(x, t, schedule)
    }
}

/// Wraps a model and adds a constant bias to every predicted component.
pub struct Biased<M> {
    pub inner: M,
    pub bias: f64,
}

impl<M> Biased<M> {
    pub fn new(inner: M, bias: f64) -> Self {
        Self { inner, bias }
    }
}

impl<M: ScoreModel> ScoreModel for Biased<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_noise_batch(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        let b = self.bias;
        Ok(self.inner.predict_noise_batch(x, t, schedule)?.map(|v| v + b))
    }
}

pub(crate) fn check_batch(x: &Tensor, dim: usize) -> Result<usize> {
    if x.len() % dim != 0 {
        return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
    }
    Ok(x.len() / dim)
}
