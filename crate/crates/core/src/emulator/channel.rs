//! Synthetic frequency responses for the emulated AP.
//!
//! A multipath channel with taps `(d_i, a_i)` over `N` subcarriers has
//! `H[k] = sum_i a_i * exp(-j*2*pi*k*d_i / N)`. Optional complex Gaussian
//! noise is added per subcarrier before quantization.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("multipath channel needs at least one tap")]
    NoTaps,
    #[error("noise_sigma must be finite and non-negative, got {0}")]
    BadNoise(f64),
    #[error("quantizer scale must be finite and positive, got {0}")]
    BadScale(f64),
    #[error("channel parameters must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub delay_samples: i64,
    pub amplitude: Complex64,
}

impl Tap {
    pub fn new(delay_samples: i64, amplitude: Complex64) -> Self {
        Self {
            delay_samples,
            amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelKind {
    Flat { gain: f64 },
    Multipath { taps: Vec<Tap> },
}

/// Maps the complex response onto 16-bit I/Q samples: multiply by `scale`,
/// round to nearest, saturate to `[-32768, 32767]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub scale: f64,
}

impl Default for Quantizer {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl Quantizer {
    pub fn quantize(&self, value: f64) -> i32 {
        (value * self.scale)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64) as i32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    #[serde(flatten)]
    pub kind: ChannelKind,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub quantizer: Quantizer,
}

impl Default for ChannelModel {
    /// A three-path indoor-like channel with peak magnitude well inside 16 bits.
    fn default() -> Self {
        Self {
            kind: ChannelKind::Multipath {
                taps: vec![
                    Tap::new(0, Complex64::new(4000.0, 0.0)),
                    Tap::new(3, Complex64::from_polar(1500.0, 0.7)),
                    Tap::new(9, Complex64::from_polar(600.0, -2.1)),
                ],
            },
            noise_sigma: 40.0,
            quantizer: Quantizer::default(),
        }
    }
}

impl ChannelModel {
    pub fn flat(gain: f64) -> Self {
        Self {
            kind: ChannelKind::Flat { gain },
            noise_sigma: 0.0,
            quantizer: Quantizer::default(),
        }
    }

    pub fn multipath(taps: Vec<Tap>) -> Self {
        Self {
            kind: ChannelKind::Multipath { taps },
            noise_sigma: 0.0,
            quantizer: Quantizer::default(),
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.quantizer.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(ChannelError::BadNoise(self.noise_sigma));
        }
        let scale = self.quantizer.scale;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(ChannelError::BadScale(scale));
        }
        match &self.kind {
            ChannelKind::Flat { gain } if !gain.is_finite() => Err(ChannelError::NonFinite),
            ChannelKind::Multipath { taps } if taps.is_empty() => Err(ChannelError::NoTaps),
            ChannelKind::Multipath { taps }
                if taps
                    .iter()
                    .any(|t| !(t.amplitude.re.is_finite() && t.amplitude.im.is_finite())) =>
            {
                Err(ChannelError::NonFinite)
            }
            _ => Ok(()),
        }
    }

    /// Noiseless response at each of `n` subcarriers.
    pub fn response(&self, n: usize) -> Vec<Complex64> {
        match &self.kind {
            ChannelKind::Flat { gain } => vec![Complex64::new(*gain, 0.0); n],
            ChannelKind::Multipath { taps } => (0..n)
                .map(|k| {
                    taps.iter()
                        .map(|tap| {
                            // reduce k*d mod n first to keep the angle small
                            let turns = (k as i64 * tap.delay_samples).rem_euclid(n as i64);
                            let angle = -2.0 * PI * turns as f64 / n as f64;
                            tap.amplitude * Complex64::from_polar(1.0, angle)
                        })
                        .sum()
                })
                .collect(),
        }
    }

    /// Noisy, quantized I/Q samples for `n` subcarriers.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Vec<i32>, Vec<i32>) {
        let mut response = self.response(n);
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma validated");
            for h in &mut response {
                h.re += normal.sample(rng);
                h.im += normal.sample(rng);
            }
        }
        response
            .iter()
            .map(|h| (self.quantizer.quantize(h.re), self.quantizer.quantize(h.im)))
            .unzip()
    }
}
