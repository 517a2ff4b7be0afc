//! State transition operator of the linear part dz/dτ = −½β(τ)·z.

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

/// A continuous-time noise rate β(τ) on [0, horizon].
pub trait RateCurve {
    fn horizon(&self) -> f64;
    fn rate(&self, tau: f64) -> f64;
    /// ∫_{t1}^{t2} β(τ) dτ (signed).
    fn integrated_rate(&self, t1: f64, t2: f64) -> f64;
}

impl RateCurve for NoiseSchedule {
    fn horizon(&self) -> f64 {
        NoiseSchedule::horizon(self)
    }

    fn rate(&self, tau: f64) -> f64 {
        self.rate_at(tau)
    }

    fn integrated_rate(&self, t1: f64, t2: f64) -> f64 {
        NoiseSchedule::integrated_rate(self, t1, t2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRate {
    pub rate: f64,
    pub horizon: f64,
}

impl RateCurve for ConstantRate {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn rate(&self, _tau: f64) -> f64 {
        self.rate
    }

    fn integrated_rate(&self, t1: f64, t2: f64) -> f64 {
        self.rate * (t2 - t1)
    }
}

/// β(τ) rising linearly from `start` at τ = 0 to `end` at τ = horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearRate {
    pub start: f64,
    pub end: f64,
    pub horizon: f64,
}

impl RateCurve for LinearRate {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn rate(&self, tau: f64) -> f64 {
        self.start + (self.end - self.start) * tau / self.horizon
    }

    fn integrated_rate(&self, t1: f64, t2: f64) -> f64 {
        let slope = (self.end - self.start) / self.horizon;
        self.start * (t2 - t1) + 0.5 * slope * (t2 * t2 - t1 * t1)
    }
}

/// G(t₂, t₁) = exp(∫_{t₁}^{t₂} −½β(τ) dτ).
///
/// For the discrete schedule the rate is the piecewise-constant
/// −ln(1 − β_t), so G(0, T) = 1/√ᾱ_T exactly.
pub fn transition_operator(t2: f64, t1: f64, curve: &impl RateCurve) -> Result<f64> {
    let h = curve.horizon();
    for t in [t1, t2] {
        if !(0.0..=h).contains(&t) {
            return Err(Error::TimestepOutOfRange { t, lo: 0.0, hi: h });
        }
    }
    if t1 == t2 {
        return Ok(1.0);
    }
    Ok((-0.5 * curve.integrated_rate(t1, t2)).exp())
}
