//! High-frequency amplification of decoder skip features.
//!
//! Each channel is transformed with a 2-D FFT; bins whose normalized radius
//! exceeds the cutoff are multiplied by `s` and the real inverse transform is
//! returned. The radius of bin `(u, v)` on an `H × W` grid is
//!
//! ```text
//! r = sqrt((f_u / (H/2))² + (f_v / (W/2))²) / √2
//! ```
//!
//! with signed frequencies `f`, so `r = 1` at the corner Nyquist bin and the
//! mask is symmetric under negation, which keeps the output real.

use std::collections::BTreeSet;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendDescriptor, HookBundle, SkipTransform};
use crate::error::{Error, Result};
use crate::tensor::FeatureGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreqConfig {
    /// Gain applied to the high band.
    pub s: f64,
    /// Normalized radius above which bins count as high frequency.
    pub cutoff: f64,
    /// Skip stages to modify, 0 being the highest resolution.
    pub stages: BTreeSet<usize>,
}

impl Default for FreqConfig {
    fn default() -> Self {
        Self {
            s: 1.4,
            cutoff: 0.25,
            stages: BTreeSet::from([0, 1]),
        }
    }
}

impl FreqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::InvalidConfig(format!("freq.s must be positive, got {}", self.s)));
        }
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::InvalidConfig(format!("freq.cutoff must lie in (0, 1], got {}", self.cutoff)));
        }
        Ok(())
    }
}

fn signed_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Normalized radius of bin `(u, v)` on an `height × width` spectrum.
pub fn normalized_radius(u: usize, v: usize, height: usize, width: usize) -> f64 {
    let axis = |k: usize, n: usize| if n > 1 { signed_frequency(k, n) / (n as f64 / 2.0) } else { 0.0 };
    (axis(u, height).powi(2) + axis(v, width).powi(2)).sqrt() / std::f64::consts::SQRT_2
}

/// Whether bin `(u, v)` belongs to the amplified band.
pub fn is_high_band(u: usize, v: usize, height: usize, width: usize, cutoff: f64) -> bool {
    normalized_radius(u, v, height, width) > cutoff
}

/// Forward or inverse 2-D FFT of a row-major `height × width` buffer, in place.
pub(crate) fn fft2(buf: &mut [Complex<f64>], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in buf.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::default(); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = buf[y * width + x];
        }
        col_fft.process(&mut column);
        for y in 0..height {
            buf[y * width + x] = column[y];
        }
    }
}

pub fn enhance_skip(features: &FeatureGrid, config: &FreqConfig) -> Result<FeatureGrid> {
    if !features.is_finite() {
        return Err(Error::NonFiniteInput("skip features"));
    }
    let (c, h, w) = (features.channels(), features.height(), features.width());
    if config.s == 1.0 || h * w == 0 {
        return Ok(features.clone());
    }
    let gain: Vec<f64> = (0..h * w)
        .map(|i| if is_high_band(i / w, i % w, h, w, config.cutoff) { config.s } else { 1.0 })
        .collect();
    let norm = 1.0 / (h * w) as f64;
    let mut out = FeatureGrid::zeros(c, h, w);
    let mut buf = vec![Complex::default(); h * w];
    for ch in 0..c {
        for (b, &v) in buf.iter_mut().zip(features.channel(ch)) {
            *b = Complex::new(v as f64, 0.0);
        }
        fft2(&mut buf, h, w, false);
        for (b, g) in buf.iter_mut().zip(&gain) {
            *b *= *g;
        }
        fft2(&mut buf, h, w, true);
        for (o, b) in out.channel_mut(ch).iter_mut().zip(&buf) {
            *o = (b.re * norm) as f32;
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFiniteInput("enhanced skip features"));
    }
    Ok(out)
}

/// [`SkipTransform`] applying [`enhance_skip`] on the configured stages.
#[derive(Debug, Clone)]
pub struct FrequencySkipEnhancer {
    config: FreqConfig,
}

impl FrequencySkipEnhancer {
    pub fn new(config: FreqConfig) -> Self {
        Self { config }
    }
}

impl SkipTransform for FrequencySkipEnhancer {
    fn stages(&self) -> &BTreeSet<usize> {
        &self.config.stages
    }

    fn apply(&self, _stage: usize, features: &FeatureGrid) -> Result<FeatureGrid> {
        enhance_skip(features, &self.config)
    }
}

/// Install the enhancer into `hooks`. An empty stage set leaves them as they are.
pub fn apply_to_backend(hooks: HookBundle, config: &FreqConfig, descriptor: &BackendDescriptor) -> Result<HookBundle> {
    config.validate()?;
    if let Some(&stage) = config.stages.iter().find(|&&s| s >= descriptor.num_skip_stages) {
        return Err(Error::UnknownStage {
            stage,
            count: descriptor.num_skip_stages,
        });
    }
    if config.stages.is_empty() {
        return Ok(hooks);
    }
    Ok(HookBundle {
        skip_transform: Some(Arc::new(FrequencySkipEnhancer::new(config.clone()))),
        ..hooks
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{DiffusionBackend, ZeroEpsilonBackend};

    fn config(s: f64) -> FreqConfig {
        FreqConfig {
            s,
            ..FreqConfig::default()
        }
    }

    #[test]
    fn unit_gain_is_identity() {
        let f = FeatureGrid::from_fn(2, 5, 6, |c, y, x| (c * 31 + y * 7 + x * 3) as f32 % 5.0);
        let out = enhance_skip(&f, &config(1.0)).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn dc_is_untouched() {
        let f = FeatureGrid::filled(1, 8, 8, 0.7);
        let out = enhance_skip(&f, &config(3.0)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn nyquist_checkerboard_doubles() {
        let f = FeatureGrid::from_fn(1, 8, 8, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        let out = enhance_skip(&f, &config(2.0)).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!((o - 2.0 * i).abs() < 1e-3);
        }
    }

    #[test]
    fn radius_corners() {
        assert_eq!(normalized_radius(0, 0, 8, 8), 0.0);
        assert!((normalized_radius(4, 4, 8, 8) - 1.0).abs() < 1e-12);
        assert!((normalized_radius(7, 1, 8, 8) - normalized_radius(1, 7, 8, 8)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let mut f = FeatureGrid::zeros(1, 2, 2);
        f.set(0, 1, 1, f32::INFINITY);
        assert!(matches!(enhance_skip(&f, &config(2.0)), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn stage_checks() {
        let b = ZeroEpsilonBackend::new(4).unwrap();
        let d = b.descriptor();
        let cfg = FreqConfig {
            stages: BTreeSet::from([2]),
            ..FreqConfig::default()
        };
        assert!(matches!(
            apply_to_backend(HookBundle::default(), &cfg, d),
            Err(Error::UnknownStage { stage: 2, count: 2 })
        ));
        let empty = FreqConfig {
            stages: BTreeSet::new(),
            ..FreqConfig::default()
        };
        assert!(apply_to_backend(HookBundle::default(), &empty, d).unwrap().skip_transform.is_none());
        assert!(apply_to_backend(HookBundle::default(), &FreqConfig::default(), d)
            .unwrap()
            .skip_transform
            .is_some());
    }
}
