//! Deterministic DDIM (η = 0) noise schedule.
//!
//! A schedule maps each inference timestep to a cumulative signal level
//! `ᾱ_t`. Sampling moves a latent from the level of timestep `t` to the level
//! of the next (less noisy) timestep; inversion walks the same pairs in the
//! opposite direction. Because both directions use the identical closed-form
//! transfer, an exact noise predictor makes them exact inverses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const TRAIN_TIMESTEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaSchedule {
    /// Scaled-linear betas from 0.00085 to 0.012, as used by Stable Diffusion.
    ScaledLinear,
    /// Piecewise-constant `ᾱ ∈ {1, 1/4, 1/16, 1/64}`. Every `√ᾱ` ratio is a
    /// power of two, so DDIM rescaling is exact in binary floating point.
    Dyadic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdimSchedule {
    kind: AlphaSchedule,
    alphas_cumprod: Vec<f64>,
    timesteps: Vec<u32>,
    final_alpha: f64,
}

impl DdimSchedule {
    pub fn new(kind: AlphaSchedule, steps: usize) -> Result<Self> {
        if steps == 0 || steps > TRAIN_TIMESTEPS {
            return Err(Error::InvalidConfig(format!(
                "steps must lie in 1..={TRAIN_TIMESTEPS}, got {steps}"
            )));
        }
        let alphas_cumprod: Vec<f64> = match kind {
            AlphaSchedule::ScaledLinear => {
                let (start, end) = (0.00085f64.sqrt(), 0.012f64.sqrt());
                let n = TRAIN_TIMESTEPS as f64 - 1.0;
                let mut acc = 1.0;
                (0..TRAIN_TIMESTEPS)
                    .map(|i| {
                        let beta = (start + (end - start) * i as f64 / n).powi(2);
                        acc *= 1.0 - beta;
                        acc
                    })
                    .collect()
            }
            AlphaSchedule::Dyadic => (0..TRAIN_TIMESTEPS)
                .map(|i| 0.25f64.powi((4 * i / TRAIN_TIMESTEPS) as i32))
                .collect(),
        };
        let ratio = TRAIN_TIMESTEPS / steps;
        let timesteps = (0..steps).rev().map(|s| (s * ratio + 1) as u32).collect();
        let final_alpha = alphas_cumprod[0];
        Ok(Self {
            kind,
            alphas_cumprod,
            timesteps,
            final_alpha,
        })
    }

    pub fn kind(&self) -> AlphaSchedule {
        self.kind
    }

    /// Inference timesteps, strictly decreasing.
    pub fn timesteps(&self) -> &[u32] {
        &self.timesteps
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn index_of(&self, timestep: u32) -> Result<usize> {
        self.timesteps
            .iter()
            .position(|&t| t == timestep)
            .ok_or(Error::UnknownTimestep(timestep))
    }

    /// Timestep reached after denoising step `index`; `None` is the clean end.
    pub fn output_timestep(&self, index: usize) -> Option<u32> {
        self.timesteps.get(index + 1).copied()
    }

    pub fn alpha(&self, timestep: Option<u32>) -> f64 {
        match timestep {
            Some(t) => self.alphas_cumprod[(t as usize).min(TRAIN_TIMESTEPS - 1)],
            None => self.final_alpha,
        }
    }

    /// Move `x` from signal level `from` to level `to` given a noise
    /// prediction, with no stochastic term.
    pub fn transfer(&self, x: &Tensor3, eps: &Tensor3, from: Option<u32>, to: Option<u32>) -> Result<Tensor3> {
        let (a_from, a_to) = (self.alpha(from), self.alpha(to));
        let (sa_from, sa_to) = (a_from.sqrt(), a_to.sqrt());
        let x_coef = (sa_to / sa_from) as f32;
        let eps_coef = ((1.0 - a_to).sqrt() - sa_to * (1.0 - a_from).sqrt() / sa_from) as f32;
        x.zip_with(eps, |x, e| x_coef * x + eps_coef * e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timesteps_strictly_decrease() {
        let s = DdimSchedule::new(AlphaSchedule::ScaledLinear, 75).unwrap();
        assert_eq!(s.steps(), 75);
        assert_eq!(s.timesteps()[0], 963);
        assert_eq!(*s.timesteps().last().unwrap(), 1);
        assert!(s.timesteps().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn scaled_linear_endpoints() {
        let s = DdimSchedule::new(AlphaSchedule::ScaledLinear, 50).unwrap();
        assert!((s.alpha(Some(0)) - (1.0 - 0.00085)).abs() < 1e-12);
        assert!(s.alpha(Some(999)) < 0.01);
        assert_eq!(s.alpha(None), s.alpha(Some(0)));
    }

    #[test]
    fn dyadic_transfer_is_exactly_invertible() {
        let s = DdimSchedule::new(AlphaSchedule::Dyadic, 10).unwrap();
        let x = Tensor3::from_fn(1, 3, 3, |_, y, x| 0.1 + 0.37 * y as f32 - 0.011 * x as f32);
        let zero = Tensor3::zeros(1, 3, 3);
        let mut z = x.clone();
        let ts: Vec<Option<u32>> = std::iter::once(None)
            .chain(s.timesteps().iter().rev().map(|&t| Some(t)))
            .collect();
        for w in ts.windows(2) {
            z = s.transfer(&z, &zero, w[0], w[1]).unwrap();
        }
        for w in ts.windows(2).rev() {
            z = s.transfer(&z, &zero, w[1], w[0]).unwrap();
        }
        assert_eq!(z, x);
    }

    #[test]
    fn rejects_zero_steps() {
        assert!(DdimSchedule::new(AlphaSchedule::Dyadic, 0).is_err());
    }
}
